//! End-to-end compression: post-vision sparsity, budgets, scoring and eviction.

use vlcache::budget::{allocate_sparsity_aware, BudgetConfig};
use vlcache::scoring::{compress_cache, EvictionConfig, ScoringPolicy, StatsSource};
use vlcache::sparsity::{post_vision_sparsity, SparsityConfig};
use vlcache::trace::{generate_trace, GenSpec};

fn main() -> vlcache::Result<()> {
    let generated = generate_trace(&GenSpec {
        noise_scale: 0.0,
        ..GenSpec::default()
    })?;
    let trace = &generated.trace;
    let gamma = post_vision_sparsity(trace, &SparsityConfig::default())?.layer_means();
    let alloc = allocate_sparsity_aware(&gamma, trace.prompt_len(), &BudgetConfig::default())?;
    let cache = compress_cache(
        trace,
        &alloc,
        &ScoringPolicy::PostVision,
        &EvictionConfig::default(),
        &StatsSource::default(),
    )?;

    for record in cache.kept.records() {
        let planted = generated
            .heavy_tokens
            .iter()
            .filter(|j| record.indices.binary_search(j).is_ok())
            .count();
        println!(
            "layer {} kv {}: kept {:>3}, planted heavy hitters kept {planted}/{}",
            record.layer,
            record.kv_head,
            record.kept_count,
            generated.heavy_tokens.len()
        );
    }
    let map = &cache.compaction[0][0];
    let first = map.old_to_new.iter().position(Option::is_some).unwrap_or(0);
    println!("layer 0 kv 0: token {first} -> slot {:?}", map.old_to_new[first]);
    println!("retained {} of {} cache entries", cache.kept.total_retained(), {
        let h = trace.header();
        h.num_layers * h.num_kv_heads * h.prompt_len
    });
    Ok(())
}
