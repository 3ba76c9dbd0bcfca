//! Policy quality metrics.
//!
//! The cache hit rate compares a policy's top-`k` prompt tokens with the
//! top-`k` of the first decoding query's softmax over the prompt keys.
//! Contribution and coverage measure how much of the decoding attention lands
//! on each modality: contribution through threshold-filtered attention mass,
//! coverage through the positions picked by a per-row top-`k`.

use serde::{Deserialize, Serialize};

use crate::attention::{dense_attention_rows, prefix_softmax, QueryWindow};
use crate::error::{Error, Result};
use crate::scoring::{score_query_head, top_k, ScoringPolicy, StatsSource};
use crate::sparsity::threshold_filter;
use crate::trace::{AttentionTrace, Modality};

/// Which decoding rows the hit-rate oracle uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleRows {
    /// Only the first decoding row.
    #[default]
    First,
    /// Hit rate averaged over every decoding row.
    AllDecoding,
}

/// Softmax of decoding row `m + offset` over the prompt keys `0..m`.
pub fn decode_oracle_scores(trace: &AttentionTrace, layer: usize, head: usize, offset: usize) -> Result<Vec<f64>> {
    let n_dec = trace.header().decode_len;
    if n_dec == 0 {
        return Err(Error::NoDecodingRows);
    }
    if offset >= n_dec {
        return Err(Error::OutOfRange {
            what: "decoding row",
            index: offset,
            bound: n_dec,
        });
    }
    let m = trace.prompt_len();
    prefix_softmax(trace, layer, head, m + offset, m)
}

fn check_k(k: usize, m: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::EmptyTopK);
    }
    if k > m {
        return Err(Error::OutOfRange {
            what: "k",
            index: k,
            bound: m,
        });
    }
    Ok(())
}

/// Share of the oracle's top-`k` that the policy's top-`k` also keeps.
pub fn hit_rate(policy_scores: &[f64], oracle_scores: &[f64], k: usize) -> Result<f64> {
    if policy_scores.len() != oracle_scores.len() {
        return Err(Error::LengthMismatch {
            left: policy_scores.len(),
            right: oracle_scores.len(),
        });
    }
    check_k(k, oracle_scores.len())?;
    let kept = top_k(policy_scores, k);
    Ok(set_hit_rate(&kept, &top_k(oracle_scores, k)))
}

/// `|kept ∩ oracle| / |oracle|` for sorted index sets.
pub fn set_hit_rate(kept: &[usize], oracle: &[usize]) -> f64 {
    if oracle.is_empty() {
        return 0.0;
    }
    let (mut a, mut b, mut hits) = (0, 0, 0usize);
    while a < kept.len() && b < oracle.len() {
        match kept[a].cmp(&oracle[b]) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                hits += 1;
                a += 1;
                b += 1;
            }
        }
    }
    hits as f64 / oracle.len() as f64
}

/// Policy scores for one query head; structural policies are sized to `k`.
pub fn policy_scores(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    policy: &ScoringPolicy,
    k: usize,
    source: &StatsSource,
) -> Result<Vec<f64>> {
    let policy = match policy {
        ScoringPolicy::StreamingInitRecent { .. } => ScoringPolicy::streaming_for_budget(k),
        p => *p,
    };
    score_query_head(trace, layer, head, &policy, source)
}

pub fn cache_hit_rate(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    policy: &ScoringPolicy,
    k: usize,
    source: &StatsSource,
    rows: OracleRows,
) -> Result<f64> {
    check_k(k, trace.prompt_len())?;
    let scores = policy_scores(trace, layer, head, policy, k, source)?;
    hit_rate_for_scores(trace, layer, head, &scores, k, rows)
}

/// Hit rate of precomputed policy scores, for reuse across a `k` sweep.
pub fn hit_rate_for_scores(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    scores: &[f64],
    k: usize,
    rows: OracleRows,
) -> Result<f64> {
    let n = match rows {
        OracleRows::First => 1,
        OracleRows::AllDecoding => trace.header().decode_len,
    };
    let mut total = 0.0;
    for offset in 0..n.max(1) {
        let oracle = decode_oracle_scores(trace, layer, head, offset)?;
        total += hit_rate(scores, &oracle, k)?;
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitRateRow {
    pub layer: usize,
    /// Query head, or empty when averaged over heads.
    pub head: Option<usize>,
    pub policy: String,
    pub k: usize,
    pub hit_rate: f64,
}

/// Hit rates for every (policy, k, layer, head).
pub fn hit_rate_sweep(
    trace: &AttentionTrace,
    policies: &[(String, ScoringPolicy)],
    ks: &[usize],
    source: &StatsSource,
    rows: OracleRows,
) -> Result<Vec<HitRateRow>> {
    let h = trace.header();
    let mut out = vec![];
    for (name, policy) in policies {
        for &k in ks {
            check_k(k, h.prompt_len)?;
            for layer in 0..h.num_layers {
                for head in 0..h.num_query_heads {
                    out.push(HitRateRow {
                        layer,
                        head: Some(head),
                        policy: name.clone(),
                        k,
                        hit_rate: cache_hit_rate(trace, layer, head, policy, k, source, rows)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Collapses per-head rows into one row per (policy, k, layer).
pub fn mean_over_heads(rows: &[HitRateRow]) -> Vec<HitRateRow> {
    let mut out: Vec<(HitRateRow, usize)> = vec![];
    for r in rows {
        match out
            .iter_mut()
            .find(|(o, _)| o.layer == r.layer && o.k == r.k && o.policy == r.policy)
        {
            Some((o, n)) => {
                o.hit_rate += r.hit_rate;
                *n += 1;
            }
            None => out.push((
                HitRateRow {
                    head: None,
                    ..r.clone()
                },
                1,
            )),
        }
    }
    out.into_iter()
        .map(|(mut r, n)| {
            r.hit_rate /= n as f64;
            r
        })
        .collect()
}

/// Decoding rows `t..T` and the coverage budget `floor(alpha_eval * T)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalWindow {
    pub first_decode: usize,
    pub seq_len: usize,
    pub alpha_eval: f64,
}

impl EvalWindow {
    /// Every decoding row of the trace.
    pub fn decoding(trace: &AttentionTrace, alpha_eval: f64) -> Result<Self> {
        let w = Self {
            first_decode: trace.prompt_len(),
            seq_len: trace.seq_len(),
            alpha_eval,
        };
        w.validate(trace)?;
        Ok(w)
    }

    pub fn validate(&self, trace: &AttentionTrace) -> Result<()> {
        let m = trace.prompt_len();
        if self.seq_len != trace.seq_len() {
            return Err(Error::spec("seq_len", format!("{} != trace length {}", self.seq_len, trace.seq_len())));
        }
        if self.first_decode < m || self.first_decode >= self.seq_len {
            return Err(if trace.header().decode_len == 0 {
                Error::NoDecodingRows
            } else {
                Error::OutOfRange {
                    what: "first decoding row",
                    index: self.first_decode,
                    bound: self.seq_len,
                }
            });
        }
        if !(self.alpha_eval > 0.0 && self.alpha_eval < 1.0) {
            return Err(Error::spec("alpha_eval", format!("{} not in (0, 1)", self.alpha_eval)));
        }
        Ok(())
    }

    /// Coverage's per-row top-k size, capped at the prompt length.
    pub fn top_k(&self, prompt_len: usize) -> Result<usize> {
        let k = (self.alpha_eval * self.seq_len as f64).floor() as usize;
        if k == 0 {
            return Err(Error::EmptyTopK);
        }
        Ok(k.min(prompt_len))
    }

    fn query_window(&self) -> Result<QueryWindow> {
        QueryWindow::new(self.first_decode, self.seq_len)
    }
}

/// Mean over decoding rows of the filtered prompt mass falling on `modality`.
pub fn contribution(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    window: &EvalWindow,
    modality: Modality,
    p: f64,
) -> Result<f64> {
    window.validate(trace)?;
    let m = trace.prompt_len();
    let layout = trace.layout();
    let dense = dense_attention_rows(trace, layer, head, window.query_window()?)?;
    let (mut total, mut rows) = (0.0, 0usize);
    for (offset, row) in dense.rows().enumerate() {
        let i = window.first_decode + offset;
        let filtered = threshold_filter(&row[..=i], p)?;
        let all: f64 = filtered[..m].iter().sum();
        if all <= 0.0 {
            continue;
        }
        let part: f64 = (0..m)
            .filter(|&j| layout.contains(modality, j))
            .map(|j| filtered[j])
            .sum();
        total += part / all;
        rows += 1;
    }
    Ok(if rows == 0 { 0.0 } else { total / rows as f64 })
}

/// Mean over decoding rows of the share of top-k prompt positions in `modality`.
pub fn coverage(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    window: &EvalWindow,
    modality: Modality,
) -> Result<f64> {
    window.validate(trace)?;
    let m = trace.prompt_len();
    let k = window.top_k(m)?;
    let layout = trace.layout();
    let dense = dense_attention_rows(trace, layer, head, window.query_window()?)?;
    let mut total = 0.0;
    for row in dense.rows() {
        let picked = top_k(&row[..m], k);
        let inside = picked.iter().filter(|&&j| layout.contains(modality, j)).count();
        total += inside as f64 / k as f64;
    }
    Ok(total / window.query_window()?.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRow {
    pub layer: usize,
    pub modality: String,
    pub contribution: f64,
    pub coverage: f64,
}

/// Head-averaged contribution and coverage for every layer and modality.
pub fn modality_stats(trace: &AttentionTrace, window: &EvalWindow, p: f64) -> Result<Vec<ModalityRow>> {
    let h = trace.header();
    let heads = h.num_query_heads as f64;
    let mut out = vec![];
    for layer in 0..h.num_layers {
        for modality in Modality::ALL {
            let (mut contrib, mut cover) = (0.0, 0.0);
            for head in 0..h.num_query_heads {
                contrib += contribution(trace, layer, head, window, modality, p)?;
                cover += coverage(trace, layer, head, window, modality)?;
            }
            out.push(ModalityRow {
                layer,
                modality: modality.name().to_string(),
                contribution: contrib / heads,
                coverage: cover / heads,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{random_trace, scalar_key_trace};
    use crate::trace::{generate_trace, GenSpec};

    fn naive_decode_row(t: &AttentionTrace, layer: usize, head: usize, i: usize, keys: usize) -> Vec<f64> {
        let d = t.header().head_dim;
        let kv = head / (t.header().num_query_heads / t.header().num_kv_heads);
        let q = t.query_row(layer, head, i);
        let logits: Vec<f64> = (0..keys)
            .map(|j| {
                let k = t.key_row(layer, kv, j);
                q.iter().zip(k).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn sorted_top(scores: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(b.cmp(&a)));
        let mut top = idx[..k].to_vec();
        top.sort();
        top
    }

    #[test]
    fn oracle_row_matches_naive_softmax() {
        let t = random_trace(3, 96);
        let row = decode_oracle_scores(&t, 1, 2, 0).unwrap();
        let naive = naive_decode_row(&t, 1, 2, 96, 96);
        for (a, b) in row.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_policy_hits_everything() {
        let t = random_trace(5, 64);
        let oracle = decode_oracle_scores(&t, 0, 0, 0).unwrap();
        for k in 1..=64 {
            assert_eq!(hit_rate(&oracle, &oracle, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn full_budget_hits_everything() {
        let t = random_trace(5, 64);
        let src = StatsSource::default();
        for policy in [ScoringPolicy::AccumulatedAttention, ScoringPolicy::PostVision] {
            let r = cache_hit_rate(&t, 1, 3, &policy, 64, &src, OracleRows::First).unwrap();
            assert_eq!(r, 1.0);
        }
    }

    #[test]
    fn hit_rate_matches_brute_force_intersection() {
        let sp = GenSpec {
            num_layers: 2,
            num_query_heads: 2,
            num_kv_heads: 1,
            head_dim: 16,
            prompt_len: 256,
            post_vision_len: 16,
            decode_len: 2,
            seed: 7,
            ..GenSpec::default()
        };
        let t = generate_trace(&sp).unwrap().trace;
        let src = StatsSource::default();
        for policy in [ScoringPolicy::AccumulatedAttention, ScoringPolicy::PostVision] {
            for layer in 0..2 {
                for head in 0..2 {
                    let scores = dense_attention_rows(&t, layer, head, policy.query_window(&t, &src).unwrap().unwrap())
                        .unwrap();
                    let mut col = vec![0.0; 256];
                    for row in scores.rows() {
                        col.iter_mut().zip(row).for_each(|(c, v)| *c += v);
                    }
                    let oracle = naive_decode_row(&t, layer, head, 256, 256);
                    let a = sorted_top(&col, 26);
                    let b = sorted_top(&oracle, 26);
                    let expect = a.iter().filter(|x| b.contains(x)).count() as f64 / 26.0;
                    let got = cache_hit_rate(&t, layer, head, &policy, 26, &src, OracleRows::First).unwrap();
                    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn zero_noise_post_vision_is_perfect() {
        for seed in 0..4 {
            let g = generate_trace(&GenSpec {
                noise_scale: 0.0,
                seed,
                ..GenSpec::default()
            })
            .unwrap();
            let src = StatsSource::default();
            let planted = g.heavy_tokens.len();
            let t = &g.trace;
            for layer in 0..t.header().num_layers {
                for head in 0..t.header().num_query_heads {
                    let oracle = top_k(&decode_oracle_scores(t, layer, head, 0).unwrap(), planted);
                    assert_eq!(oracle, g.heavy_tokens);
                    let r = cache_hit_rate(t, layer, head, &ScoringPolicy::PostVision, planted, &src, OracleRows::First)
                        .unwrap();
                    assert_eq!(r, 1.0);
                }
            }
        }
    }

    #[test]
    fn hit_rate_errors() {
        let t = random_trace(1, 32);
        let src = StatsSource::default();
        let p = ScoringPolicy::PostVision;
        assert!(matches!(cache_hit_rate(&t, 0, 0, &p, 0, &src, OracleRows::First), Err(Error::EmptyTopK)));
        assert!(matches!(
            cache_hit_rate(&t, 0, 0, &p, 33, &src, OracleRows::First),
            Err(Error::OutOfRange { .. })
        ));
        let no_dec = scalar_key_trace(&[0.0, 1.0, 2.0], 1, 0);
        assert!(matches!(decode_oracle_scores(&no_dec, 0, 0, 0), Err(Error::NoDecodingRows)));
        assert!(matches!(hit_rate(&[1.0], &[1.0, 2.0], 1), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn averaged_rows_variant_equals_first_with_one_row() {
        let t = scalar_key_trace(&[0.5, 2.0, 0.1, 1.0, 3.0, 0.0], 2, 1);
        let src = StatsSource::default();
        let p = ScoringPolicy::PostVision;
        let a = cache_hit_rate(&t, 0, 0, &p, 2, &src, OracleRows::First).unwrap();
        let b = cache_hit_rate(&t, 0, 0, &p, 2, &src, OracleRows::AllDecoding).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_shape_and_head_means() {
        let t = random_trace(2, 48);
        let policies = vec![
            ("vlcache".to_string(), ScoringPolicy::PostVision),
            ("streaming".to_string(), ScoringPolicy::streaming_for_budget(1)),
        ];
        let rows = hit_rate_sweep(&t, &policies, &[4, 8, 12], &StatsSource::default(), OracleRows::First).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 2 * 4);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.hit_rate)));
        let means = mean_over_heads(&rows);
        assert_eq!(means.len(), 2 * 3 * 2);
        let r0 = &means[0];
        let direct: f64 = rows
            .iter()
            .filter(|r| r.layer == r0.layer && r.k == r0.k && r.policy == r0.policy)
            .map(|r| r.hit_rate)
            .sum::<f64>()
            / 4.0;
        assert!((r0.hit_rate - direct).abs() < 1e-15);
    }

    /// Direct restatement of the contribution and coverage definitions.
    fn dense_modality(t: &AttentionTrace, layer: usize, head: usize, alpha: f64, p: f64) -> [(f64, f64); 2] {
        let (m, s) = (t.prompt_len(), t.seq_len());
        let k = (((alpha * s as f64).floor()) as usize).min(m);
        let mut out = [(0.0, 0.0); 2];
        for i in m..s {
            let row = naive_decode_row(t, layer, head, i, i + 1);
            let mx = row.iter().cloned().fold(0.0, f64::max);
            let kept: Vec<f64> = row.iter().map(|&v| if v >= p * mx { v } else { 0.0 }).collect();
            let all: f64 = kept[..m].iter().sum();
            let top = sorted_top(&row[..m], k);
            for (slot, modality) in Modality::ALL.iter().enumerate() {
                let inside = |j: usize| t.layout().modality_of(j) == *modality;
                out[slot].0 += (0..m).filter(|&j| inside(j)).map(|j| kept[j]).sum::<f64>() / all;
                out[slot].1 += top.iter().filter(|&&j| inside(j)).count() as f64 / k as f64;
            }
        }
        out.iter_mut().for_each(|(a, b)| {
            *a /= (s - m) as f64;
            *b /= (s - m) as f64;
        });
        out
    }

    #[test]
    fn modality_metrics_match_dense_formulas() {
        for seed in 0..4 {
            let t = generate_trace(&GenSpec {
                num_layers: 2,
                num_query_heads: 2,
                num_kv_heads: 1,
                head_dim: 8,
                prompt_len: 80,
                post_vision_len: 8,
                pre_vision_len: 6,
                decode_len: 3,
                noise_scale: 1.0,
                seed,
                ..GenSpec::default()
            })
            .unwrap()
            .trace;
            let w = EvalWindow::decoding(&t, 0.1).unwrap();
            for layer in 0..2 {
                for head in 0..2 {
                    let oracle = dense_modality(&t, layer, head, 0.1, 0.01);
                    let mut sums = (0.0, 0.0);
                    for (slot, modality) in Modality::ALL.iter().enumerate() {
                        let c = contribution(&t, layer, head, &w, *modality, 0.01).unwrap();
                        let v = coverage(&t, layer, head, &w, *modality).unwrap();
                        assert!((c - oracle[slot].0).abs() < 1e-6);
                        assert!((v - oracle[slot].1).abs() < 1e-6);
                        sums.0 += c;
                        sums.1 += v;
                    }
                    assert!((sums.0 - 1.0).abs() < 1e-6);
                    assert!((sums.1 - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn all_mass_on_vision() {
        // Large vision keys dominate; post-vision key at the end is tiny.
        let t = scalar_key_trace(&[9.0, 9.0, 9.0, -9.0, 0.0], 1, 1);
        let w = EvalWindow {
            first_decode: 4,
            seq_len: 5,
            alpha_eval: 0.5,
        };
        assert_eq!(contribution(&t, 0, 0, &w, Modality::Vision, 0.01).unwrap(), 1.0);
        assert_eq!(coverage(&t, 0, 0, &w, Modality::Vision).unwrap(), 1.0);
        assert_eq!(contribution(&t, 0, 0, &w, Modality::Language, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn eval_window_errors() {
        let t = random_trace(1, 32);
        assert!(EvalWindow::decoding(&t, 0.0).is_err());
        let w = EvalWindow {
            first_decode: 31,
            seq_len: t.seq_len(),
            alpha_eval: 0.1,
        };
        assert!(w.validate(&t).is_err());
        let tiny = EvalWindow::decoding(&t, 0.01).unwrap();
        assert!(matches!(coverage(&t, 0, 0, &tiny, Modality::Vision), Err(Error::EmptyTopK)));
    }
}
