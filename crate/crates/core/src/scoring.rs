//! Token scoring policies and one-shot eviction.
//!
//! Attention-based policies score a prompt token by the post-softmax
//! attention it receives, summed over a slice of prompt query rows:
//!
//! | policy                 | query rows            |
//! |------------------------|-----------------------|
//! | `AccumulatedAttention` | `0..m`                |
//! | `SlidingWindow(w)`     | `m - w..m`            |
//! | `PostVision`           | `m - tau..m`          |
//!
//! A KV head's score is the mean over the query heads of its group.
//! Eviction keeps the most recent `ceil(recent_window_frac * k)` prompt
//! tokens, then fills the remaining slots by score, breaking ties toward the
//! later index.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{streaming_stats_tiled, QueryWindow, Tiling};
use crate::budget::BudgetAllocation;
use crate::error::{Error, Result};
use crate::trace::AttentionTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoringPolicy {
    /// H2O-style accumulation over every prompt row.
    AccumulatedAttention,
    /// Accumulation over the last `window` prompt rows.
    SlidingWindow { window: usize },
    /// Accumulation over the post-vision rows.
    PostVision,
    /// StreamingLLM-style: first `n_init` and last `n_recent` prompt tokens.
    StreamingInitRecent { n_init: usize, n_recent: usize },
}

impl ScoringPolicy {
    /// StreamingLLM defaults for a layer keeping `kept_count` tokens:
    /// `ceil(0.1 k)` initial tokens, the rest recent.
    pub fn streaming_for_budget(kept_count: usize) -> Self {
        let n_init = ((0.1 * kept_count as f64) - 1e-9).ceil().max(1.0) as usize;
        Self::StreamingInitRecent {
            n_init,
            n_recent: kept_count.saturating_sub(n_init).max(1),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::AccumulatedAttention => "accumulated",
            Self::SlidingWindow { .. } => "sliding_window",
            Self::PostVision => "post_vision",
            Self::StreamingInitRecent { .. } => "streaming",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::SlidingWindow { window: 0 } => Err(Error::spec("window", "must be at least 1")),
            Self::StreamingInitRecent { n_init, n_recent } if n_init == 0 || n_recent == 0 => {
                Err(Error::spec("n_init/n_recent", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// Prompt query rows the policy accumulates over, `None` for structural policies.
    pub fn query_window(&self, trace: &AttentionTrace, source: &StatsSource) -> Result<Option<QueryWindow>> {
        self.validate()?;
        let m = trace.prompt_len();
        let window = match *self {
            Self::AccumulatedAttention => QueryWindow::prompt(trace),
            Self::SlidingWindow { window } => {
                if window > m {
                    return Err(Error::OutOfRange {
                        what: "sliding window",
                        index: window,
                        bound: m,
                    });
                }
                QueryWindow::new(m - window, m)?
            }
            Self::PostVision => {
                let tau = trace.header().post_vision_len;
                let rows = match (tau, source.fallback_window) {
                    (0, Some(w)) if w > 0 => w.min(m),
                    (0, _) => return Err(Error::NoPostVisionTokens),
                    (tau, _) => tau,
                };
                QueryWindow::new(m - rows, m)?
            }
            Self::StreamingInitRecent { .. } => return Ok(None),
        };
        Ok(Some(window))
    }
}

/// How attention-based scores are computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsSource {
    pub tiling: Tiling,
    /// Threshold passed to the statistics pass; it does not affect scores.
    pub p: f64,
    /// Rows used by `PostVision` when the trace has `tau = 0`.
    pub fallback_window: Option<usize>,
}

impl Default for StatsSource {
    fn default() -> Self {
        Self {
            tiling: Tiling::default(),
            p: 0.01,
            fallback_window: None,
        }
    }
}

/// Scores of every prompt token as seen by one query head.
pub fn score_query_head(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    policy: &ScoringPolicy,
    source: &StatsSource,
) -> Result<Vec<f64>> {
    trace.check_head(layer, head)?;
    let m = trace.prompt_len();
    match policy.query_window(trace, source)? {
        Some(window) => {
            let stats = streaming_stats_tiled(trace, layer, head, window, source.p, source.tiling)?;
            Ok(stats.col_score)
        }
        None => Ok(structural_scores(policy, m)),
    }
}

fn structural_scores(policy: &ScoringPolicy, m: usize) -> Vec<f64> {
    match *policy {
        ScoringPolicy::StreamingInitRecent { n_init, n_recent } => (0..m)
            .map(|j| if j < n_init || j + n_recent >= m { 1.0 } else { 0.0 })
            .collect(),
        _ => unreachable!("attention-based policy has a query window"),
    }
}

/// Scores of every prompt token for one KV head: mean over its query-head group.
pub fn score_tokens(
    trace: &AttentionTrace,
    layer: usize,
    kv_head: usize,
    policy: &ScoringPolicy,
    source: &StatsSource,
) -> Result<Vec<f64>> {
    let header = trace.header();
    if kv_head >= header.num_kv_heads {
        return Err(Error::OutOfRange {
            what: "kv head",
            index: kv_head,
            bound: header.num_kv_heads,
        });
    }
    let heads = header.query_heads_of(kv_head);
    let group = heads.len() as f64;
    let mut total = vec![0.0f64; trace.prompt_len()];
    for h in heads {
        let s = score_query_head(trace, layer, h, policy, source)?;
        total.iter_mut().zip(&s).for_each(|(t, v)| *t += v);
    }
    total.iter_mut().for_each(|t| *t /= group);
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvictionConfig {
    /// Share of each layer's budget reserved for the most recent prompt tokens.
    pub recent_window_frac: f64,
}

impl Default for EvictionConfig {
    fn default() -> Self {
        Self { recent_window_frac: 0.10 }
    }
}

impl EvictionConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..1.0).contains(&self.recent_window_frac) {
            Ok(())
        } else {
            Err(Error::spec(
                "recent_window_frac",
                format!("{} not in [0, 1)", self.recent_window_frac),
            ))
        }
    }

    /// Recent tokens kept unconditionally for a budget of `kept_count`.
    pub fn recent_reserve(&self, kept_count: usize) -> usize {
        let r = (self.recent_window_frac * kept_count as f64 - 1e-9).ceil().max(0.0) as usize;
        r.min(kept_count)
    }
}

/// Ranking order: higher score first, later index first on ties.
#[inline]
fn rank(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(b.cmp(&a))
}

/// Indices of the `k` best entries of `candidates`, sorted ascending.
fn top_k_of(scores: &[f64], mut candidates: Vec<usize>, k: usize) -> Vec<usize> {
    if k < candidates.len() {
        if k > 0 {
            candidates.select_nth_unstable_by(k - 1, |&a, &b| rank(scores, a, b));
        }
        candidates.truncate(k);
    }
    candidates.sort_unstable();
    candidates
}

/// The `k` highest-scoring indices (ties toward the later index), sorted ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    top_k_of(scores, (0..scores.len()).collect(), k)
}

/// Keeps `kept_count` of the `scores.len()` prompt tokens.
pub fn evict(scores: &[f64], kept_count: usize, config: &EvictionConfig) -> Result<Vec<usize>> {
    config.validate()?;
    let m = scores.len();
    if kept_count == 0 {
        return Err(Error::ZeroKeptCount);
    }
    if kept_count > m {
        return Err(Error::OutOfRange {
            what: "kept count",
            index: kept_count,
            bound: m,
        });
    }
    let reserve = config.recent_reserve(kept_count);
    let mut kept = top_k_of(scores, (0..m - reserve).collect(), kept_count - reserve);
    kept.extend(m - reserve..m);
    Ok(kept)
}

/// Sorted kept prompt indices, indexed `[layer][kv_head]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptSets {
    pub prompt_len: usize,
    pub sets: Vec<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptSetRecord {
    pub layer: usize,
    pub kv_head: usize,
    pub kept_count: usize,
    pub indices: Vec<usize>,
}

impl KeptSets {
    pub fn get(&self, layer: usize, kv_head: usize) -> &[usize] {
        &self.sets[layer][kv_head]
    }

    pub fn total_retained(&self) -> usize {
        self.sets.iter().flatten().map(Vec::len).sum()
    }

    pub fn records(&self) -> Vec<KeptSetRecord> {
        let mut out = vec![];
        for (layer, heads) in self.sets.iter().enumerate() {
            for (kv_head, idx) in heads.iter().enumerate() {
                out.push(KeptSetRecord {
                    layer,
                    kv_head,
                    kept_count: idx.len(),
                    indices: idx.clone(),
                });
            }
        }
        out
    }
}

/// Old prompt index to compacted cache slot for one (layer, KV head).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompactionMap {
    pub old_to_new: Vec<Option<usize>>,
}

impl CompactionMap {
    pub fn from_kept(kept: &[usize], prompt_len: usize) -> Self {
        let mut old_to_new = vec![None; prompt_len];
        for (new, &old) in kept.iter().enumerate() {
            old_to_new[old] = Some(new);
        }
        Self { old_to_new }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressedCache {
    pub kept: KeptSets,
    /// `[layer][kv_head]`
    pub compaction: Vec<Vec<CompactionMap>>,
}

/// Runs scoring and eviction for every (layer, KV head) with one policy.
pub fn compress_cache(
    trace: &AttentionTrace,
    allocation: &BudgetAllocation,
    policy: &ScoringPolicy,
    eviction: &EvictionConfig,
    source: &StatsSource,
) -> Result<CompressedCache> {
    compress_cache_with(trace, allocation, |_, _| *policy, eviction, source)
}

/// Like [`compress_cache`], choosing the policy per layer from its kept count.
pub fn compress_cache_with<F>(
    trace: &AttentionTrace,
    allocation: &BudgetAllocation,
    policy_for: F,
    eviction: &EvictionConfig,
    source: &StatsSource,
) -> Result<CompressedCache>
where
    F: Fn(usize, usize) -> ScoringPolicy + Sync,
{
    eviction.validate()?;
    let h = trace.header();
    if allocation.num_layers() != h.num_layers {
        return Err(Error::LengthMismatch {
            left: allocation.num_layers(),
            right: h.num_layers,
        });
    }
    if allocation.prompt_len != h.prompt_len {
        return Err(Error::spec(
            "allocation",
            format!("built for prompt_len {}, trace has {}", allocation.prompt_len, h.prompt_len),
        ));
    }
    let kv_heads = h.num_kv_heads;
    let flat = (0..h.num_layers * kv_heads)
        .into_par_iter()
        .map(|idx| {
            let (layer, kv) = (idx / kv_heads, idx % kv_heads);
            let k = allocation.kept_counts[layer];
            let policy = policy_for(layer, k);
            let scores = score_tokens(trace, layer, kv, &policy, source)?;
            evict(&scores, k, eviction)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sets = vec![Vec::with_capacity(kv_heads); h.num_layers];
    for (idx, kept) in flat.into_iter().enumerate() {
        sets[idx / kv_heads].push(kept);
    }
    let compaction = sets
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|kept| CompactionMap::from_kept(kept, h.prompt_len))
                .collect()
        })
        .collect();
    Ok(CompressedCache {
        kept: KeptSets {
            prompt_len: h.prompt_len,
            sets,
        },
        compaction,
    })
}
