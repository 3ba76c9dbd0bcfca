//! Mean cache hit rate per policy over a batch of synthetic traces.

use vlcache::eval::{cache_hit_rate, OracleRows};
use vlcache::scoring::{ScoringPolicy, StatsSource};
use vlcache::trace::{generate_trace, GenSpec};

fn main() -> vlcache::Result<()> {
    let seeds = 0..20u64;
    let base = GenSpec::default();
    let k = (0.1 * base.prompt_len as f64).ceil() as usize;
    let policies = [
        ScoringPolicy::AccumulatedAttention,
        ScoringPolicy::SlidingWindow { window: 32 },
        ScoringPolicy::PostVision,
        ScoringPolicy::streaming_for_budget(k),
    ];
    let src = StatsSource::default();
    let mut sums = [0.0f64; 4];
    let mut n = 0usize;
    for seed in seeds {
        let trace = generate_trace(&GenSpec { seed, ..base.clone() })?.trace;
        let h = trace.header();
        for layer in 0..h.num_layers {
            for head in 0..h.num_query_heads {
                for (s, p) in sums.iter_mut().zip(&policies) {
                    *s += cache_hit_rate(&trace, layer, head, p, k, &src, OracleRows::First)?;
                }
                n += 1;
            }
        }
    }
    println!("k = {k}, {n} (trace, layer, head) samples");
    for (s, p) in sums.iter().zip(&policies) {
        println!("{:>16}  {:.4}", p.name(), s / n as f64);
    }
    Ok(())
}
