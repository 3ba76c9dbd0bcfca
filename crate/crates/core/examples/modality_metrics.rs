//! Contribution and coverage of vision and language tokens per layer.

use vlcache::eval::{modality_stats, EvalWindow};
use vlcache::trace::{generate_trace, GenSpec};

fn main() -> vlcache::Result<()> {
    let trace = generate_trace(&GenSpec {
        pre_vision_len: 24,
        noise_scale: 1.5,
        ..GenSpec::default()
    })?
    .trace;
    let window = EvalWindow::decoding(&trace, 0.1)?;
    println!("layer  modality  contribution  coverage");
    for row in modality_stats(&trace, &window, 0.01)? {
        println!("{:>5}  {:<8}  {:>12.4}  {:>8.4}", row.layer, row.modality, row.contribution, row.coverage);
    }
    Ok(())
}
