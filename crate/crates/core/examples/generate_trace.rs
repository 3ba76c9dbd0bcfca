//! Generates a synthetic trace, writes it to disk and reads it back.

use vlcache::trace::{generate_trace, read_trace, sidecar_path, write_trace, GenSpec};

fn main() -> vlcache::Result<()> {
    let spec = GenSpec {
        prompt_len: 128,
        pre_vision_len: 8,
        post_vision_len: 12,
        ..GenSpec::default()
    };
    let generated = generate_trace(&spec)?;
    let dir = std::env::temp_dir().join(format!("vlcache-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| vlcache::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("demo.vlct");
    write_trace(&generated.trace, &path)?;
    let back = read_trace(&path)?;
    assert_eq!(back, generated.trace);

    let layout = back.layout();
    println!("wrote {} (+ {})", path.display(), sidecar_path(&path).display());
    println!("header: {:?}", back.header());
    println!(
        "segments: pre {:?}, vision {:?}, post {:?}",
        layout.pre_vision.range(),
        layout.vision.range(),
        layout.post_vision.range()
    );
    println!("planted heavy tokens: {:?}", generated.heavy_tokens);
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
