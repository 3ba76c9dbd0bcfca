//! Threshold filtering and layer sparsity.
//!
//! An attention entry survives the filter when it is at least `p` times the
//! maximum of its row. The sparsity of a (layer, head) over a query window is
//! the fraction of causal entries the filter zeroes. All measurements go
//! through the streaming statistics pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{check_threshold, streaming_stats_tiled, QueryWindow, Tiling};
use crate::error::{Error, Result};
use crate::trace::AttentionTrace;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    /// Relative threshold in (0, 1).
    pub p: f64,
    pub tiling: Tiling,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            p: 0.01,
            tiling: Tiling::default(),
        }
    }
}

impl SparsityConfig {
    pub fn with_p(p: f64) -> Self {
        Self {
            p,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    PostVision,
    Decoding,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::PostVision => "post_vision",
            Phase::Decoding => "decoding",
        }
    }
}

/// Per-(layer, query head) sparsity ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub phase: Phase,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Row-major `[layer][head]`.
    pub gamma: Vec<f64>,
}

impl LayerSparsity {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.gamma[layer * self.num_heads + head]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.gamma[layer * self.num_heads..(layer + 1) * self.num_heads]
    }

    /// Head-averaged sparsity per layer.
    pub fn layer_means(&self) -> Vec<f64> {
        (0..self.num_layers)
            .map(|l| self.layer(l).iter().sum::<f64>() / self.num_heads as f64)
            .collect()
    }
}

/// Zeroes every entry below `p` times the row maximum.
pub fn threshold_filter(row: &[f64], p: f64) -> Result<Vec<f64>> {
    check_threshold(p)?;
    if row.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&bad) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidEntry(bad));
    }
    let max = row.iter().copied().fold(0.0f64, f64::max);
    let cut = p * max;
    Ok(row.iter().map(|&v| if v >= cut { v } else { 0.0 }).collect())
}

/// Row-wise [`threshold_filter`] over a row-major matrix of the given width.
pub fn threshold_filter_matrix(data: &[f64], width: usize, p: f64) -> Result<Vec<f64>> {
    if width == 0 || data.is_empty() || data.len() % width != 0 {
        return Err(Error::EmptyInput);
    }
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(width) {
        out.extend(threshold_filter(row, p)?);
    }
    Ok(out)
}

/// Sparsity of every (layer, head) over an arbitrary query window.
pub fn window_sparsity(
    trace: &AttentionTrace,
    config: &SparsityConfig,
    window: QueryWindow,
    phase: Phase,
) -> Result<LayerSparsity> {
    check_threshold(config.p)?;
    let h = trace.header();
    let (num_layers, num_heads) = (h.num_layers, h.num_query_heads);
    let gamma = (0..num_layers * num_heads)
        .into_par_iter()
        .map(|idx| {
            let stats =
                streaming_stats_tiled(trace, idx / num_heads, idx % num_heads, window, config.p, config.tiling)?;
            Ok(stats.total_below() as f64 / stats.total_causal() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerSparsity {
        phase,
        num_layers,
        num_heads,
        gamma,
    })
}

/// Sparsity over the full prompt, normalised by the `m(m+1)/2` causal entries.
pub fn prefill_sparsity(trace: &AttentionTrace, config: &SparsityConfig) -> Result<LayerSparsity> {
    window_sparsity(trace, config, QueryWindow::prompt(trace), Phase::Prefill)
}

/// Sparsity over the last `tau` prompt rows; row `i'` of the window sees
/// `m - tau + i' + 1` keys.
pub fn post_vision_sparsity(trace: &AttentionTrace, config: &SparsityConfig) -> Result<LayerSparsity> {
    let tau = trace.header().post_vision_len;
    if tau == 0 {
        return Err(Error::NoPostVisionTokens);
    }
    stats_window_sparsity(trace, config, tau)
}

/// Post-vision-style sparsity over the last `min(rows, m)` prompt rows, used
/// when the trace has no post-vision boundary.
pub fn stats_window_sparsity(trace: &AttentionTrace, config: &SparsityConfig, rows: usize) -> Result<LayerSparsity> {
    let window = QueryWindow::last_prompt_rows(trace, rows)?;
    window_sparsity(trace, config, window, Phase::PostVision)
}

/// Sparsity of the decoding rows against every earlier key.
pub fn decoding_sparsity(trace: &AttentionTrace, config: &SparsityConfig) -> Result<LayerSparsity> {
    window_sparsity(trace, config, QueryWindow::decoding(trace)?, Phase::Decoding)
}

/// Pearson correlation of two equal-length series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("a"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("b"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Shape similarity of two head-averaged sparsity curves.
pub fn curve_similarity(a: &LayerSparsity, b: &LayerSparsity) -> Result<f64> {
    pearson(&a.layer_means(), &b.layer_means())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::dense_attention_rows;
    use crate::test_support::{constant_trace, random_trace, scalar_key_trace};
    use crate::trace::{generate_trace, GenSpec};
    use proptest::prelude::*;

    #[test]
    fn filter_examples() {
        assert_eq!(threshold_filter(&[0.5, 0.5], 0.01).unwrap(), vec![0.5, 0.5]);
        assert_eq!(
            threshold_filter(&[0.98, 0.015, 0.005], 0.01).unwrap(),
            vec![0.98, 0.015, 0.0]
        );
        assert!(matches!(threshold_filter(&[1.0], 1.0), Err(Error::InvalidThreshold(_))));
        assert!(matches!(threshold_filter(&[], 0.5), Err(Error::EmptyInput)));
        assert!(matches!(threshold_filter(&[-1.0], 0.5), Err(Error::InvalidEntry(_))));
        assert!(matches!(threshold_filter(&[f64::NAN], 0.5), Err(Error::InvalidEntry(_))));
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_keeps_max(
            row in prop::collection::vec(0.0f64..10.0, 1..64),
            p in 0.001f64..0.999,
        ) {
            let once = threshold_filter(&row, p).unwrap();
            let twice = threshold_filter(&once, p).unwrap();
            prop_assert_eq!(&once, &twice);
            let max = row.iter().cloned().fold(0.0, f64::max);
            prop_assert!(once.contains(&max));
        }
    }

    #[test]
    fn one_token_prompt_is_dense() {
        let t = constant_trace(1, 0);
        let s = prefill_sparsity(&t, &SparsityConfig::default()).unwrap();
        assert_eq!(s.gamma, vec![0.0]);
    }

    #[test]
    fn two_token_example_filters_one_of_three() {
        let t = scalar_key_trace(&[0.0, (0.001f64 / 0.999).ln() as f32], 1, 0);
        let s = prefill_sparsity(&t, &SparsityConfig::default()).unwrap();
        assert!((s.gamma[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    fn brute_force(t: &AttentionTrace, window: QueryWindow, p: f64) -> Vec<f64> {
        let h = t.header();
        let mut out = vec![];
        for l in 0..h.num_layers {
            for head in 0..h.num_query_heads {
                let rows = dense_attention_rows(t, l, head, window).unwrap();
                let (mut zeros, mut total) = (0usize, 0usize);
                for (off, row) in rows.rows().enumerate() {
                    let i = window.start + off;
                    let filtered = threshold_filter(&row[..=i], p).unwrap();
                    zeros += filtered.iter().filter(|&&v| v == 0.0).count();
                    total += i + 1;
                }
                out.push(zeros as f64 / total as f64);
            }
        }
        out
    }

    #[test]
    fn prefill_matches_brute_force() {
        let t = random_trace(11, 256);
        let s = prefill_sparsity(&t, &SparsityConfig::default()).unwrap();
        let oracle = brute_force(&t, QueryWindow::prompt(&t), 0.01);
        for (a, b) in s.gamma.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn post_vision_matches_brute_force_and_alg_denominator() {
        let t = random_trace(12, 96);
        let cfg = SparsityConfig::default();
        let s = post_vision_sparsity(&t, &cfg).unwrap();
        let oracle = brute_force(&t, QueryWindow::new(80, 96).unwrap(), 0.01);
        for (a, b) in s.gamma.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn post_vision_with_full_tau_equals_prefill() {
        let g = generate_trace(&GenSpec {
            prompt_len: 64,
            post_vision_len: 64,
            ..GenSpec::default()
        })
        .unwrap();
        let cfg = SparsityConfig::default();
        assert_eq!(
            post_vision_sparsity(&g.trace, &cfg).unwrap().gamma,
            prefill_sparsity(&g.trace, &cfg).unwrap().gamma
        );
    }

    #[test]
    fn tau_one_is_last_row_sparsity() {
        let g = generate_trace(&GenSpec {
            prompt_len: 40,
            post_vision_len: 1,
            ..GenSpec::default()
        })
        .unwrap();
        let s = post_vision_sparsity(&g.trace, &SparsityConfig::default()).unwrap();
        let oracle = brute_force(&g.trace, QueryWindow::new(39, 40).unwrap(), 0.01);
        assert_eq!(s.gamma, oracle);
    }

    #[test]
    fn missing_windows_are_errors() {
        let t = constant_trace(4, 0);
        let cfg = SparsityConfig::default();
        assert!(matches!(decoding_sparsity(&t, &cfg), Err(Error::NoDecodingRows)));
        let g = generate_trace(&GenSpec {
            post_vision_len: 0,
            ..GenSpec::default()
        })
        .unwrap();
        assert!(matches!(post_vision_sparsity(&g.trace, &cfg), Err(Error::NoPostVisionTokens)));
        assert!(stats_window_sparsity(&g.trace, &cfg, 50).is_ok());
        assert!(matches!(
            prefill_sparsity(&t, &SparsityConfig::with_p(1.5)),
            Err(Error::InvalidThreshold(_))
        ));
    }

    #[test]
    fn uniform_decoding_row_is_dense() {
        let t = constant_trace(5, 1);
        let s = decoding_sparsity(&t, &SparsityConfig::default()).unwrap();
        assert_eq!(s.gamma, vec![0.0]);
    }

    #[test]
    fn decoding_matches_brute_force() {
        let t = random_trace(13, 64);
        let s = decoding_sparsity(&t, &SparsityConfig::default()).unwrap();
        let oracle = brute_force(&t, QueryWindow::decoding(&t).unwrap(), 0.01);
        for (a, b) in s.gamma.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_decoding_tracks_post_vision() {
        for seed in 0..5 {
            let g = generate_trace(&GenSpec {
                noise_scale: 0.0,
                seed,
                ..GenSpec::default()
            })
            .unwrap();
            let cfg = SparsityConfig::default();
            let pv = post_vision_sparsity(&g.trace, &cfg).unwrap().layer_means();
            let dec = decoding_sparsity(&g.trace, &cfg).unwrap().layer_means();
            for (a, b) in pv.iter().zip(&dec) {
                assert!((a - b).abs() <= 0.05, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn sparsity_is_monotone_in_p() {
        let t = random_trace(14, 128);
        let mut prev: Option<Vec<f64>> = None;
        for p in [0.001, 0.005, 0.01, 0.05, 0.2, 0.5] {
            let s = prefill_sparsity(&t, &SparsityConfig::with_p(p)).unwrap();
            assert!(s.gamma.iter().all(|g| (0.0..=1.0).contains(g)));
            if let Some(prev) = &prev {
                assert!(prev.iter().zip(&s.gamma).all(|(a, b)| a <= b));
            }
            prev = Some(s.gamma);
        }
    }

    #[test]
    fn pearson_examples() {
        let a = [0.1, 0.5, 0.3, 0.9];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|x| 2.0 - x).collect();
        assert!((pearson(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&a, &[1.0; 4]), Err(Error::ZeroVariance("b"))));
        assert!(matches!(pearson(&a, &[1.0; 3]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn pearson_matches_textbook_formula() {
        // n * sum(xy) - sum(x) sum(y) over the product of root variances.
        let x = [0.31, 0.82, 0.15, 0.67, 0.44, 0.93, 0.05];
        let y = [0.12, 0.55, 0.71, 0.28, 0.49, 0.87, 0.33];
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        assert!((pearson(&x, &y).unwrap() - r).abs() < 1e-12);
    }
}
