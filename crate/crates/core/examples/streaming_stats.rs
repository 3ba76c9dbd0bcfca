//! Tiled softmax statistics against the dense reference for one head.

use vlcache::attention::{dense_attention_rows, streaming_stats_tiled, QueryWindow, Tiling};
use vlcache::trace::{generate_trace, GenSpec};

fn main() -> vlcache::Result<()> {
    let trace = generate_trace(&GenSpec::default())?.trace;
    let window = QueryWindow::last_prompt_rows(&trace, 16)?;
    let dense = dense_attention_rows(&trace, 1, 0, window)?;

    let mut reference = vec![0.0f64; window.num_keys()];
    for row in dense.rows() {
        reference.iter_mut().zip(row).for_each(|(c, v)| *c += v);
    }
    for tile in [16, 64, 256] {
        let stats = streaming_stats_tiled(&trace, 1, 0, window, 0.01, Tiling::square(tile))?;
        let worst = stats
            .col_score
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!(
            "tile {tile:>3}: max |col_score - dense| = {worst:.2e}, below threshold {} of {} entries",
            stats.total_below(),
            stats.total_causal()
        );
    }
    Ok(())
}
