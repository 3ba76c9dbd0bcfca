//! Full versus compressed decoding across prompt lengths.
//!
//! `cargo run --release --example decode_bench -- 2048 8192`

use vlcache::bench::{run_bench, BenchSpec};

fn main() -> vlcache::Result<()> {
    let lens: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("prompt length"))
        .collect();
    let lens = if lens.is_empty() { vec![1024, 4096] } else { lens };
    println!("{:>7} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}", "m", "prefill", "overhead", "dec_full", "dec_comp", "dec_x", "e2e_x", "kv_ratio");
    for m in lens {
        let r = run_bench(&BenchSpec {
            prompt_len: m,
            ..BenchSpec::default()
        })?;
        println!(
            "{:>7} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>8.2} {:>8.2} {:>8.4}",
            m,
            r.prefill_time,
            r.stats_overhead_time,
            r.decode_time_full,
            r.decode_time_compressed,
            r.decode_speedup,
            r.e2e_speedup,
            r.kv_bytes_compressed as f64 / r.kv_bytes_full as f64
        );
    }
    Ok(())
}
