//! Deterministic toy-transformer trace generator.
//!
//! Each layer draws a logit scale, each KV head a preferred direction. The
//! post-vision rows of a query head all equal one base query pointing close to
//! that direction; decoding rows are the post-vision centroid plus gaussian
//! noise. A planted set of heavy-hitter keys is aligned with the group
//! centroid at four times the norm of every other key, so under zero noise
//! they outrank every other prompt key for every decoding row. Post-vision keys
//! are anti-aligned with the centroid and rank below all other prompt keys.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AttentionTrace, LayerTensors, ModalityLayout, Tensor3, TraceHeader};
use crate::error::{Error, Result};

const HEAVY_NORM: f64 = 4.0;
const LOGIT_SCALE_RANGE: (f64, f64) = (1.0, 1.6);
const HEAD_SCALE_JITTER: f64 = 0.05;
const HEAD_DIRECTION_JITTER: f64 = 0.2;
const PROMPT_QUERY_GAIN: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    pub post_vision_len: usize,
    pub decode_len: usize,
    pub seed: u64,
    /// Length of the optional text segment before the vision tokens.
    pub pre_vision_len: usize,
    /// Fraction of prompt tokens planted as heavy hitters.
    pub heavy_fraction: f64,
    /// Relative size of the gaussian perturbation applied to decoding queries.
    pub noise_scale: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 32,
            prompt_len: 256,
            post_vision_len: 16,
            decode_len: 8,
            seed: 7,
            pre_vision_len: 0,
            heavy_fraction: 0.05,
            noise_scale: 0.1,
        }
    }
}

impl GenSpec {
    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            num_layers: self.num_layers,
            num_query_heads: self.num_query_heads,
            num_kv_heads: self.num_kv_heads,
            head_dim: self.head_dim,
            prompt_len: self.prompt_len,
            post_vision_len: self.post_vision_len,
            decode_len: self.decode_len,
            seed: self.seed,
        }
    }

    /// Number of planted heavy tokens, `ceil(heavy_fraction * prompt_len)`.
    pub fn heavy_count(&self) -> usize {
        (self.heavy_fraction * self.prompt_len as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.header().validate()?;
        ModalityLayout::new(self.prompt_len, self.pre_vision_len, self.post_vision_len)?;
        if !(self.heavy_fraction > 0.0 && self.heavy_fraction < 1.0) {
            return Err(Error::spec("heavy_fraction", format!("{} not in (0, 1)", self.heavy_fraction)));
        }
        if self.heavy_fraction * (self.prompt_len as f64) < 1.0 {
            return Err(Error::spec(
                "heavy_fraction",
                format!(
                    "heavy_fraction * prompt_len = {} plants less than one token",
                    self.heavy_fraction * self.prompt_len as f64
                ),
            ));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::spec("noise_scale", format!("{} must be finite and >= 0", self.noise_scale)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTrace {
    pub trace: AttentionTrace,
    /// Sorted prompt indices of the planted heavy-hitter keys.
    pub heavy_tokens: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v = gaussian(rng, d);
    normalize(&mut v);
    v
}

fn store(dst: &mut [f32], src: &[f64], scale: f64) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o = (x * scale) as f32;
    }
}

pub fn generate_trace(spec: &GenSpec) -> Result<GeneratedTrace> {
    spec.validate()?;
    let header = spec.header();
    let layout = ModalityLayout::new(spec.prompt_len, spec.pre_vision_len, spec.post_vision_len)?;
    let (m, d, s) = (spec.prompt_len, spec.head_dim, header.seq_len());
    let tau = spec.post_vision_len;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let heavy_count = spec.heavy_count();
    let heavy_pool = if layout.vision.len >= heavy_count {
        layout.vision.range()
    } else if m - tau >= heavy_count {
        0..m - tau
    } else {
        0..m
    };
    let mut heavy_tokens: Vec<usize> = sample(&mut rng, heavy_pool.len(), heavy_count)
        .into_iter()
        .map(|i| heavy_pool.start + i)
        .collect();
    heavy_tokens.sort_unstable();
    let mut is_heavy = vec![false; m];
    heavy_tokens.iter().for_each(|&j| is_heavy[j] = true);

    let sqrt_d = (d as f64).sqrt();
    let mut layers = Vec::with_capacity(spec.num_layers);
    for _ in 0..spec.num_layers {
        let layer_scale = rng.gen_range(LOGIT_SCALE_RANGE.0..LOGIT_SCALE_RANGE.1);
        let mut queries = Tensor3::zeros([spec.num_query_heads, s, d]);
        let mut keys = Tensor3::zeros([spec.num_kv_heads, s, d]);

        for g in 0..spec.num_kv_heads {
            let group_dir = random_unit(&mut rng, d);
            let mut group_centroid = vec![0.0f64; d];

            for h in header.query_heads_of(g) {
                let norm = layer_scale
                    * rng.gen_range(1.0 - HEAD_SCALE_JITTER..1.0 + HEAD_SCALE_JITTER)
                    * sqrt_d;
                let mut base: Vec<f64> = gaussian(&mut rng, d)
                    .iter()
                    .zip(&group_dir)
                    .map(|(z, u)| u + HEAD_DIRECTION_JITTER * z / sqrt_d)
                    .collect();
                normalize(&mut base);

                for pos in 0..m {
                    if layout.post_vision.contains(pos) {
                        store(queries.row_mut(h, pos), &base, norm);
                    } else {
                        let dir = random_unit(&mut rng, d);
                        store(queries.row_mut(h, pos), &dir, norm * PROMPT_QUERY_GAIN);
                    }
                }

                let centroid: Vec<f32> = if tau > 0 {
                    (0..d)
                        .map(|c| {
                            let sum: f64 = layout
                                .post_vision
                                .range()
                                .map(|pos| queries.row(h, pos)[c] as f64)
                                .sum();
                            (sum / tau as f64) as f32
                        })
                        .collect()
                } else {
                    base.iter().map(|x| (x * norm) as f32).collect()
                };
                let noise_std = spec.noise_scale * norm / sqrt_d;
                for pos in m..s {
                    let z = gaussian(&mut rng, d);
                    for ((o, c), zi) in queries.row_mut(h, pos).iter_mut().zip(&centroid).zip(&z) {
                        *o = c + (noise_std * zi) as f32;
                    }
                }
                for (acc, c) in group_centroid.iter_mut().zip(&centroid) {
                    *acc += *c as f64;
                }
            }
            normalize(&mut group_centroid);

            for pos in 0..s {
                if pos < m && is_heavy[pos] {
                    store(keys.row_mut(g, pos), &group_centroid, HEAVY_NORM);
                } else if layout.post_vision.contains(pos) {
                    let rank = (pos - layout.post_vision.start) as f64 / tau as f64;
                    store(keys.row_mut(g, pos), &group_centroid, -(2.0 + rank));
                } else {
                    // Unit key whose alignment with the centroid varies per token.
                    let along: f64 = rng.sample(StandardNormal);
                    let mut k: Vec<f64> = gaussian(&mut rng, d)
                        .iter()
                        .zip(&group_centroid)
                        .map(|(z, c)| along * c + z / sqrt_d)
                        .collect();
                    normalize(&mut k);
                    store(keys.row_mut(g, pos), &k, 1.0);
                }
            }
        }
        layers.push(LayerTensors { queries, keys });
    }

    let trace = AttentionTrace::new(header, layout, layers)?;
    Ok(GeneratedTrace { trace, heavy_tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GenSpec {
        GenSpec {
            num_layers: 2,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            prompt_len: 64,
            post_vision_len: 8,
            decode_len: 4,
            seed: 7,
            ..GenSpec::default()
        }
    }

    #[test]
    fn shapes_follow_header() {
        let g = generate_trace(&spec()).unwrap();
        for layer in g.trace.layers() {
            assert_eq!(layer.queries.shape(), [4, 68, 8]);
            assert_eq!(layer.keys.shape(), [2, 68, 8]);
        }
        assert_eq!(g.heavy_tokens.len(), 4);
    }

    #[test]
    fn same_seed_same_trace() {
        assert_eq!(generate_trace(&spec()).unwrap(), generate_trace(&spec()).unwrap());
        let other = GenSpec { seed: 8, ..spec() };
        assert_ne!(generate_trace(&spec()).unwrap().trace, generate_trace(&other).unwrap().trace);
    }

    #[test]
    fn zero_noise_decoding_rows_equal_centroid() {
        let sp = GenSpec { noise_scale: 0.0, ..spec() };
        let g = generate_trace(&sp).unwrap();
        let t = &g.trace;
        for l in 0..2 {
            for h in 0..4 {
                let pv = t.query_row(l, h, 63);
                for pos in 64..68 {
                    assert_eq!(t.query_row(l, h, pos), pv);
                }
            }
        }
    }

    #[test]
    fn heavy_tokens_sit_in_the_vision_segment() {
        let g = generate_trace(&GenSpec { pre_vision_len: 4, ..spec() }).unwrap();
        let layout = g.trace.layout();
        assert!(g.heavy_tokens.iter().all(|&j| layout.vision.contains(j)));
        assert!(g.heavy_tokens.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let cases = [
            (GenSpec { num_kv_heads: 3, ..spec() }, "num_kv_heads"),
            (GenSpec { heavy_fraction: 1.5, ..spec() }, "heavy_fraction"),
            (GenSpec { heavy_fraction: 0.001, ..spec() }, "heavy_fraction"),
            (GenSpec { noise_scale: -1.0, ..spec() }, "noise_scale"),
            (GenSpec { post_vision_len: 65, ..spec() }, "post_vision_len"),
            (GenSpec { head_dim: 0, ..spec() }, "head_dim"),
        ];
        for (s, field) in cases {
            match generate_trace(&s) {
                Err(Error::InvalidSpec { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected error on {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn tau_zero_and_full_prompt_tau_generate() {
        generate_trace(&GenSpec { post_vision_len: 0, ..spec() }).unwrap();
        generate_trace(&GenSpec { post_vision_len: 64, ..spec() }).unwrap();
    }
}
