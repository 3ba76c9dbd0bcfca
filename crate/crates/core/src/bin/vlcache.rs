fn main() {
    std::process::exit(vlcache::cli::main_with_args(std::env::args_os()));
}
