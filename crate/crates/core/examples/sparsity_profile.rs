//! Layer sparsity curves for prefill, post-vision and decoding rows.

use vlcache::sparsity::{curve_similarity, decoding_sparsity, post_vision_sparsity, prefill_sparsity, SparsityConfig};
use vlcache::trace::{generate_trace, GenSpec};

fn main() -> vlcache::Result<()> {
    let trace = generate_trace(&GenSpec {
        num_layers: 6,
        ..GenSpec::default()
    })?
    .trace;
    let cfg = SparsityConfig::default();
    let prefill = prefill_sparsity(&trace, &cfg)?;
    let post = post_vision_sparsity(&trace, &cfg)?;
    let decoding = decoding_sparsity(&trace, &cfg)?;

    println!("layer  prefill  post_vision  decoding");
    for (l, ((a, b), c)) in prefill
        .layer_means()
        .iter()
        .zip(post.layer_means())
        .zip(decoding.layer_means())
        .enumerate()
    {
        println!("{l:>5}  {a:>7.4}  {b:>11.4}  {c:>8.4}");
    }
    println!("pearson(prefill, decoding)     = {:.3}", curve_similarity(&prefill, &decoding)?);
    println!("pearson(post_vision, decoding) = {:.3}", curve_similarity(&post, &decoding)?);
    Ok(())
}
