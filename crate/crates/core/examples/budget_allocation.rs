//! Sparsity-aware, uniform and pyramid budgets side by side.

use vlcache::budget::{allocate_pyramid, allocate_sparsity_aware, allocate_uniform, BudgetConfig};
use vlcache::sparsity::{post_vision_sparsity, SparsityConfig};
use vlcache::trace::{generate_trace, GenSpec};

fn main() -> vlcache::Result<()> {
    let trace = generate_trace(&GenSpec {
        num_layers: 6,
        prompt_len: 512,
        ..GenSpec::default()
    })?
    .trace;
    let (l, m) = (trace.header().num_layers, trace.prompt_len());
    let config = BudgetConfig::default();
    let gamma = post_vision_sparsity(&trace, &SparsityConfig::default())?.layer_means();

    let sparse = allocate_sparsity_aware(&gamma, m, &config)?;
    let uniform = allocate_uniform(l, m, config.alpha)?;
    let pyramid = allocate_pyramid(l, m, 0.5, &config)?;

    println!("layer  gamma   sparsity  uniform  pyramid");
    for i in 0..l {
        println!(
            "{i:>5}  {:.3}  {:>8}  {:>7}  {:>7}",
            gamma[i], sparse.kept_counts[i], uniform.kept_counts[i], pyramid.kept_counts[i]
        );
    }
    let report = sparse.report();
    println!(
        "requested alpha*L = {:.3}, realized sum(beta) = {:.3}, kept fraction = {:.4}",
        report.requested_total, report.realized_total, report.realized_fraction
    );
    Ok(())
}
