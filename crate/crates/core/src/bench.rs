//! CPU micro-benchmark of decoding with a full versus a compressed KV cache.
//!
//! A small synthetic model stands in for the network: every layer runs causal
//! attention for each query head followed by a dense block (attention
//! projections plus an MLP) of `hidden_dim` width. Prefill runs tiled flash
//! attention over the prompt and writes the KV cache; decoding appends one
//! token per step and attends over whatever the cache holds. The compressed
//! path adds the statistics pass, budget allocation, eviction and a compaction
//! copy, all timed as overhead.

use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{streaming_stats_tiled, QueryWindow, Tiling};
use crate::budget::{allocate_sparsity_aware, allocate_uniform, AllocationMethod, BudgetAllocation, BudgetConfig};
use crate::error::{Error, Result};
use crate::scoring::{evict, score_query_head, EvictionConfig, ScoringPolicy, StatsSource};
use crate::trace::{generate_trace, AttentionTrace, GenSpec};

const QUERY_TILE: usize = 32;
const KEY_TILE: usize = 64;
const V_SEED_SALT: u64 = 0x5654_454e_534f_5253;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchModel {
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    /// Width of the dense block's hidden state.
    pub hidden_dim: usize,
    /// MLP expansion factor of the dense block.
    pub mlp_ratio: usize,
}

impl Default for BenchModel {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_query_heads: 1,
            num_kv_heads: 1,
            head_dim: 64,
            hidden_dim: 128,
            mlp_ratio: 4,
        }
    }
}

impl BenchModel {
    /// Rows of the per-layer dense weight matrix: q, k, v, o and the two MLP halves.
    fn dense_rows(&self) -> usize {
        (4 + 2 * self.mlp_ratio) * self.hidden_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub prompt_len: usize,
    pub batch_size: usize,
    pub n_output_tokens: usize,
    pub alpha: f64,
    pub policy: ScoringPolicy,
    pub budget: AllocationMethod,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub post_vision_len: usize,
    /// Cap on the rows fed to the statistics pass.
    pub stats_window: usize,
    pub p: f64,
    pub recent_window_frac: f64,
    /// Worker threads for decoding; `None` runs single-threaded.
    pub threads: Option<usize>,
    pub model: BenchModel,
    pub memory_limit_bytes: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            prompt_len: 2048,
            batch_size: 1,
            n_output_tokens: 100,
            alpha: 0.1,
            policy: ScoringPolicy::PostVision,
            budget: AllocationMethod::SparsityAware,
            repeats: 3,
            warmup: 1,
            seed: 7,
            post_vision_len: 50,
            stats_window: 50,
            p: 0.01,
            recent_window_frac: 0.10,
            threads: None,
            model: BenchModel::default(),
            memory_limit_bytes: 3 << 30,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("prompt_len", self.prompt_len),
            ("batch_size", self.batch_size),
            ("n_output_tokens", self.n_output_tokens),
            ("warmup", self.warmup),
            ("num_layers", self.model.num_layers),
            ("num_query_heads", self.model.num_query_heads),
            ("num_kv_heads", self.model.num_kv_heads),
            ("head_dim", self.model.head_dim),
            ("hidden_dim", self.model.hidden_dim),
            ("mlp_ratio", self.model.mlp_ratio),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::spec(field, "must be positive"));
        }
        if self.repeats < 3 {
            return Err(Error::spec("repeats", format!("{} < 3", self.repeats)));
        }
        if self.threads == Some(0) {
            return Err(Error::spec("threads", "must be positive"));
        }
        BudgetConfig::with_alpha(self.alpha).validate()?;
        EvictionConfig {
            recent_window_frac: self.recent_window_frac,
        }
        .validate()?;
        self.gen_spec().validate()?;
        let required = self.required_bytes();
        if required > self.memory_limit_bytes {
            return Err(Error::SpecTooLarge {
                required_bytes: required,
                limit_bytes: self.memory_limit_bytes,
            });
        }
        Ok(())
    }

    fn gen_spec(&self) -> GenSpec {
        GenSpec {
            num_layers: self.model.num_layers,
            num_query_heads: self.model.num_query_heads,
            num_kv_heads: self.model.num_kv_heads,
            head_dim: self.model.head_dim,
            prompt_len: self.prompt_len,
            post_vision_len: self.post_vision_len,
            decode_len: self.n_output_tokens,
            seed: self.seed,
            ..GenSpec::default()
        }
    }

    /// Rows of the statistics window: `min(tau, stats_window)`, or the
    /// fallback `min(m, stats_window)` when the prompt has no post-vision text.
    pub fn window_rows(&self) -> usize {
        match self.post_vision_len {
            0 => self.prompt_len.min(self.stats_window),
            tau => tau.min(self.stats_window),
        }
    }

    /// Upper bound on the bytes the benchmark allocates.
    pub fn required_bytes(&self) -> u64 {
        let md = &self.model;
        let s = (self.prompt_len + self.n_output_tokens) as u64;
        let (l, h, hkv, d) = (
            md.num_layers as u64,
            md.num_query_heads as u64,
            md.num_kv_heads as u64,
            md.head_dim as u64,
        );
        let f = 4u64;
        let trace = l * (h + 2 * hkv) * s * d * f;
        let full_cache = self.batch_size as u64 * l * hkv * 2 * s * d * f;
        let compressed = full_cache;
        let weights = l * (md.dense_rows() * md.hidden_dim) as u64 * f;
        let prefill_scratch = self.prompt_len as u64 * (h * d + md.hidden_dim as u64 + md.dense_rows() as u64) * f;
        trace + full_cache + compressed + weights + prefill_scratch
    }
}

/// KV bytes for `retained_tokens` cached (K and V) vectors of `head_dim` f32.
pub fn kv_bytes(retained_tokens: u64, head_dim: usize) -> u64 {
    2 * retained_tokens * head_dim as u64 * 4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub threads: usize,
    pub kept_counts: Vec<usize>,
    pub prefill_time: f64,
    pub stats_overhead_time: f64,
    pub overhead_fraction: f64,
    pub decode_time_full: f64,
    pub decode_time_compressed: f64,
    pub e2e_time_full: f64,
    pub e2e_time_compressed: f64,
    pub kv_bytes_full: u64,
    pub kv_bytes_compressed: u64,
    /// `prefill / (prefill + overhead)`.
    pub prefill_speedup: f64,
    pub decode_speedup: f64,
    pub e2e_speedup: f64,
}

impl BenchReport {
    pub fn throughput_full(&self) -> f64 {
        (self.spec.batch_size * self.spec.n_output_tokens) as f64 / self.e2e_time_full
    }

    pub fn throughput_compressed(&self) -> f64 {
        (self.spec.batch_size * self.spec.n_output_tokens) as f64 / self.e2e_time_compressed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub prompt_len: usize,
    pub window_rows: usize,
    pub prefill_time: f64,
    pub overhead_time: f64,
    pub fraction: f64,
}

/// Growable per-(layer, KV head) key and value rows of one sequence.
#[derive(Clone)]
struct KvCache {
    head_dim: usize,
    /// `[layer * num_kv_heads + kv]`
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    fn with_capacity(slots: usize, tokens: usize, head_dim: usize) -> Result<Self> {
        let alloc = || -> Result<Vec<f32>> {
            let mut v = Vec::new();
            v.try_reserve_exact(tokens * head_dim).map_err(|_| Error::SpecTooLarge {
                required_bytes: (tokens * head_dim * 4) as u64,
                limit_bytes: 0,
            })?;
            Ok(v)
        };
        Ok(Self {
            head_dim,
            keys: (0..slots).map(|_| alloc()).collect::<Result<_>>()?,
            values: (0..slots).map(|_| alloc()).collect::<Result<_>>()?,
        })
    }

    #[cfg(test)]
    fn len(&self, slot: usize) -> usize {
        self.keys[slot].len() / self.head_dim
    }
}

/// Everything the timed loops read.
struct Workload {
    trace: AttentionTrace,
    /// `[layer][kv]` values, `[seq_len, d]` row-major.
    values: Vec<Vec<Vec<f32>>>,
    /// `[layer]` dense weights, `[dense_rows, hidden]` row-major.
    weights: Vec<Vec<f32>>,
    model: BenchModel,
}

impl Workload {
    fn build(spec: &BenchSpec) -> Result<Self> {
        let trace = generate_trace(&spec.gen_spec())?.trace;
        let md = spec.model;
        let s = trace.seq_len();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ V_SEED_SALT);
        let mut gauss = |n: usize, scale: f32| -> Vec<f32> {
            (0..n)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        };
        let values = (0..md.num_layers)
            .map(|_| (0..md.num_kv_heads).map(|_| gauss(s * md.head_dim, 1.0)).collect())
            .collect();
        let w_scale = 1.0 / (md.hidden_dim as f32).sqrt();
        let weights = (0..md.num_layers)
            .map(|_| gauss(md.dense_rows() * md.hidden_dim, w_scale))
            .collect();
        Ok(Self {
            trace,
            values,
            weights,
            model: md,
        })
    }

    fn slots(&self) -> usize {
        self.model.num_layers * self.model.num_kv_heads
    }

    fn query(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        self.trace.query_row(layer, head, pos)
    }

    fn key(&self, layer: usize, kv: usize, pos: usize) -> &[f32] {
        self.trace.key_row(layer, kv, pos)
    }

    fn value(&self, layer: usize, kv: usize, pos: usize) -> &[f32] {
        let d = self.model.head_dim;
        &self.values[layer][kv][pos * d..(pos + 1) * d]
    }
}

mod kernels {
    #[inline(always)]
    pub fn dot(a: &[f32], b: &[f32]) -> f32 {
        let mut acc = [0.0f32; 8];
        let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
        let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
        for (x, y) in ca.zip(cb) {
            for i in 0..8 {
                acc[i] += x[i] * y[i];
            }
        }
        acc.iter().sum::<f32>() + tail
    }

    #[inline(always)]
    pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
        for (o, v) in y.iter_mut().zip(x) {
            *o += alpha * v;
        }
    }

    #[inline(always)]
    pub fn scale(alpha: f32, y: &mut [f32]) {
        y.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `exp(x)` for `x <= 0`, written so that loops over it vectorise.
    /// Cody-Waite range reduction and a degree-6 Taylor polynomial.
    #[inline(always)]
    pub fn exp_neg(x: f32) -> f32 {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_145_75;
        const LN2_LO: f32 = 1.428_606_8e-6;
        let x = x.max(-87.0);
        let n = (x * LOG2E + 0.5).floor();
        let r = x - n * LN2_HI - n * LN2_LO;
        let p = 1.0
            + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
        p * f32::from_bits(((n as i32 + 127) << 23) as u32)
    }

    /// Applies [`exp_neg`] to `v - shift` in place and returns the sum.
    #[inline(always)]
    pub fn exp_shifted(v: &mut [f32], shift: f32) -> f32 {
        v.iter_mut().for_each(|x| *x = exp_neg(*x - shift));
        let mut acc = [0.0f32; 8];
        let chunks = v.chunks_exact(8);
        let tail: f32 = chunks.remainder().iter().sum();
        for c in chunks {
            for i in 0..8 {
                acc[i] += c[i];
            }
        }
        acc.iter().sum::<f32>() + tail
    }
}

/// Runs `f` with AVX2 code generation when the CPU supports it.
macro_rules! dispatch {
    ($generic:ident, $avx:ident, ($($arg:ident : $ty:ty),*) -> $ret:ty) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $avx($($arg: $ty),*) -> $ret {
            $generic($($arg),*)
        }

        pub(super) fn dispatched($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were detected above.
                    return unsafe { $avx($($arg),*) };
                }
            }
            $generic($($arg),*)
        }
    };
}

mod prefill_impl {
    use super::kernels::{axpy, dot, exp_neg, exp_shifted, scale};
    use super::{KvCache, Workload, KEY_TILE, QUERY_TILE};

    /// Causal flash attention for one (layer, query head) into `out` (`[m, d]`).
    #[inline(always)]
    pub(super) fn attention_head(w: &Workload, layer: usize, head: usize, m: usize, out: &mut [f32]) {
        let d = w.model.head_dim;
        let kv = w.trace.header().kv_head_of(head);
        let inv_sqrt_d = 1.0 / (d as f32).sqrt();
        let keys = w.trace.layer(layer).expect("layer in range").keys.head(kv);
        let values = &w.values[layer][kv];
        // Key tile transposed to `[d][KEY_TILE]` so logits accumulate lane-wise.
        let mut kt = vec![0.0f32; d * KEY_TILE];
        let mut row_max = [f32::NEG_INFINITY; QUERY_TILE];
        let mut row_sum = [0.0f32; QUERY_TILE];
        let mut probs = [0.0f32; KEY_TILE];
        for q0 in (0..m).step_by(QUERY_TILE) {
            let q1 = (q0 + QUERY_TILE).min(m);
            row_max.fill(f32::NEG_INFINITY);
            row_sum.fill(0.0);
            out[q0 * d..q1 * d].fill(0.0);
            for k0 in (0..q1).step_by(KEY_TILE) {
                let k1 = (k0 + KEY_TILE).min(q1);
                for (j, key) in keys[k0 * d..k1 * d].chunks_exact(d).enumerate() {
                    for (c, x) in key.iter().enumerate() {
                        kt[c * KEY_TILE + j] = *x;
                    }
                }
                for i in q0.max(k0)..q1 {
                    let r = i - q0;
                    let n = k1.min(i + 1) - k0;
                    probs.fill(0.0);
                    for (qc, col) in w.query(layer, head, i).iter().zip(kt.chunks_exact(KEY_TILE)) {
                        let qc = qc * inv_sqrt_d;
                        for (p, k) in probs.iter_mut().zip(col) {
                            *p += qc * k;
                        }
                    }
                    let blk = &mut probs[..n];
                    let tile_max = blk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let new_max = row_max[r].max(tile_max);
                    let acc = &mut out[i * d..(i + 1) * d];
                    if row_sum[r] > 0.0 {
                        let c = exp_neg(row_max[r] - new_max);
                        row_sum[r] *= c;
                        scale(c, acc);
                    }
                    row_sum[r] += exp_shifted(blk, new_max);
                    for (e, v) in blk.iter().zip(values[k0 * d..].chunks_exact(d)) {
                        axpy(*e, v, acc);
                    }
                    row_max[r] = new_max;
                }
            }
            for i in q0..q1 {
                scale(1.0 / row_sum[i - q0], &mut out[i * d..(i + 1) * d]);
            }
        }
    }

    /// Dense block over `m` token states; returns a checksum so the work is kept.
    #[inline(always)]
    fn dense_block(weights: &[f32], hidden: usize, states: &[f32], scratch: &mut [f32]) -> f32 {
        let mut check = 0.0f32;
        for x in states.chunks_exact(hidden) {
            for (o, row) in scratch.iter_mut().zip(weights.chunks_exact(hidden)) {
                *o = dot(row, x);
            }
            check += scratch[0];
        }
        check
    }

    #[inline(always)]
    pub(super) fn prefill(w: &Workload, cache: &mut KvCache, attn: &mut [f32], states: &mut [f32], dense_out: &mut [f32]) -> f32 {
        let md = w.model;
        let (d, hidden) = (md.head_dim, md.hidden_dim);
        let m = w.trace.prompt_len();
        let mut check = 0.0f32;
        for layer in 0..md.num_layers {
            for kv in 0..md.num_kv_heads {
                let slot = layer * md.num_kv_heads + kv;
                cache.keys[slot].clear();
                cache.values[slot].clear();
                cache.keys[slot].extend_from_slice(&w.trace.layer(layer).unwrap().keys.head(kv)[..m * d]);
                cache.values[slot].extend_from_slice(&w.values[layer][kv][..m * d]);
            }
            for head in 0..md.num_query_heads {
                let out = &mut attn[..m * d];
                attention_head(w, layer, head, m, out);
                for t in 0..m {
                    let dst = &mut states[t * hidden..(t + 1) * hidden];
                    for (c, v) in out[t * d..(t + 1) * d].iter().enumerate() {
                        dst[(head * d + c) % hidden] = *v;
                    }
                }
            }
            check += dense_block(&w.weights[layer], hidden, &states[..m * hidden], dense_out);
        }
        check
    }
}

mod decode_impl {
    use super::kernels::{axpy, dot, exp_shifted, scale};
    use super::{DecodeScratch, KvCache, Workload};

    /// Attention of `q` over every cached token of `slot`.
    #[inline(always)]
    fn attend(cache: &KvCache, slot: usize, q: &[f32], inv_sqrt_d: f32, logits: &mut Vec<f32>, out: &mut [f32]) {
        let d = cache.head_dim;
        logits.clear();
        let mut max = f32::NEG_INFINITY;
        for k in cache.keys[slot].chunks_exact(d) {
            let l = dot(q, k) * inv_sqrt_d;
            max = max.max(l);
            logits.push(l);
        }
        out.fill(0.0);
        let sum = exp_shifted(logits, max);
        for (e, v) in logits.iter().zip(cache.values[slot].chunks_exact(d)) {
            axpy(*e, v, out);
        }
        scale(1.0 / sum, out);
    }

    /// One decoding step of one sequence at absolute position `pos`.
    #[inline(always)]
    pub(super) fn step(w: &Workload, cache: &mut KvCache, pos: usize, sc: &mut DecodeScratch) -> f32 {
        let md = w.model;
        let (d, hidden) = (md.head_dim, md.hidden_dim);
        let inv_sqrt_d = 1.0 / (d as f32).sqrt();
        let header = w.trace.header();
        let mut check = 0.0f32;
        for layer in 0..md.num_layers {
            for kv in 0..md.num_kv_heads {
                let slot = layer * md.num_kv_heads + kv;
                cache.keys[slot].extend_from_slice(w.key(layer, kv, pos));
                cache.values[slot].extend_from_slice(w.value(layer, kv, pos));
            }
            for head in 0..md.num_query_heads {
                let slot = layer * md.num_kv_heads + header.kv_head_of(head);
                attend(cache, slot, w.query(layer, head, pos), inv_sqrt_d, &mut sc.logits, &mut sc.attn);
                for (c, v) in sc.attn.iter().enumerate() {
                    let x = &mut sc.state[(head * d + c) % hidden];
                    *x = 0.5 * *x + v;
                }
            }
            for (o, row) in sc.dense.iter_mut().zip(w.weights[layer].chunks_exact(hidden)) {
                *o = dot(row, &sc.state);
            }
            for (x, o) in sc.state.iter_mut().zip(&sc.dense) {
                *x = 0.5 * *x + 0.01 * o;
            }
            check += sc.dense[0];
        }
        check
    }
}

fn prefill_generic(w: &Workload, cache: &mut KvCache, attn: &mut [f32], states: &mut [f32], dense_out: &mut [f32]) -> f32 {
    prefill_impl::prefill(w, cache, attn, states, dense_out)
}

mod prefill_dispatch {
    use super::*;
    dispatch!(prefill_generic, prefill_avx2, (w: &Workload, cache: &mut KvCache, attn: &mut [f32], states: &mut [f32], dense_out: &mut [f32]) -> f32);
    pub(super) use dispatched as run;
}

fn decode_generic(w: &Workload, cache: &mut KvCache, pos: usize, scratch: &mut DecodeScratch) -> f32 {
    decode_impl::step(w, cache, pos, scratch)
}

mod decode_dispatch {
    use super::*;
    dispatch!(decode_generic, decode_avx2, (w: &Workload, cache: &mut KvCache, pos: usize, scratch: &mut DecodeScratch) -> f32);
    pub(super) use dispatched as run;
}

struct PrefillScratch {
    attn: Vec<f32>,
    states: Vec<f32>,
    dense_out: Vec<f32>,
}

impl PrefillScratch {
    fn new(w: &Workload) -> Self {
        let m = w.trace.prompt_len();
        Self {
            attn: vec![0.0; m * w.model.head_dim],
            states: vec![0.0; m * w.model.hidden_dim],
            dense_out: vec![0.0; w.model.dense_rows()],
        }
    }
}

fn run_prefill(w: &Workload, caches: &mut [KvCache], scratch: &mut PrefillScratch) -> f64 {
    let start = Instant::now();
    for cache in caches.iter_mut() {
        let c = prefill_dispatch::run(w, cache, &mut scratch.attn, &mut scratch.states, &mut scratch.dense_out);
        black_box(c);
    }
    start.elapsed().as_secs_f64()
}

struct DecodeScratch {
    state: Vec<f32>,
    dense: Vec<f32>,
    attn: Vec<f32>,
    logits: Vec<f32>,
}

fn decode_sequence(w: &Workload, cache: &mut KvCache, n_steps: usize) -> f32 {
    let m = w.trace.prompt_len();
    let mut scratch = DecodeScratch {
        state: vec![0.0; w.model.hidden_dim],
        dense: vec![0.0; w.model.dense_rows()],
        attn: vec![0.0; w.model.head_dim],
        logits: Vec::with_capacity(m + n_steps),
    };
    let mut check = 0.0;
    for step in 0..n_steps {
        check += decode_dispatch::run(w, cache, m + step, &mut scratch);
    }
    check
}

/// Decodes `n_output_tokens - 1` steps for every sequence.
fn run_decode(w: &Workload, caches: &mut [KvCache], n_steps: usize, pool: Option<&rayon::ThreadPool>) -> f64 {
    let start = Instant::now();
    match pool {
        Some(pool) => {
            let c: f32 = pool.install(|| caches.par_iter_mut().map(|c| decode_sequence(w, c, n_steps)).sum());
            black_box(c);
        }
        None => {
            for cache in caches.iter_mut() {
                black_box(decode_sequence(w, cache, n_steps));
            }
        }
    }
    start.elapsed().as_secs_f64()
}

/// Scores and sparsity from the statistics window, allocation, eviction and
/// the compaction copy for one sequence.
fn compress_one(w: &Workload, spec: &BenchSpec, full: &KvCache, out: &mut KvCache) -> Result<BudgetAllocation> {
    let trace = &w.trace;
    let md = w.model;
    let (m, d) = (trace.prompt_len(), md.head_dim);
    let stats_window = QueryWindow::last_prompt_rows(trace, spec.window_rows())?;
    let source = StatsSource {
        tiling: Tiling::default(),
        p: spec.p,
        fallback_window: Some(spec.stats_window),
    };
    let policy_window = spec.policy.query_window(trace, &source)?;
    let mut gamma = vec![0.0f64; md.num_layers];
    let mut scores = vec![vec![0.0f64; m]; md.num_layers * md.num_query_heads];
    for layer in 0..md.num_layers {
        for head in 0..md.num_query_heads {
            let stats = streaming_stats_tiled(trace, layer, head, stats_window, spec.p, source.tiling)?;
            gamma[layer] += stats.total_below() as f64 / stats.total_causal() as f64 / md.num_query_heads as f64;
            let s = &mut scores[layer * md.num_query_heads + head];
            if policy_window == Some(stats_window) {
                s.copy_from_slice(&stats.col_score[..m]);
            } else {
                *s = score_query_head(trace, layer, head, &spec.policy, &source)?;
            }
        }
    }
    let alloc = match spec.budget {
        AllocationMethod::Uniform => allocate_uniform(md.num_layers, m, spec.alpha)?,
        _ => allocate_sparsity_aware(&gamma, m, &BudgetConfig::with_alpha(spec.alpha))?,
    };
    let eviction = EvictionConfig {
        recent_window_frac: spec.recent_window_frac,
    };
    let header = trace.header();
    let mut kv_scores = vec![0.0f64; m];
    for layer in 0..md.num_layers {
        for kv in 0..md.num_kv_heads {
            let group = header.query_heads_of(kv);
            kv_scores.fill(0.0);
            for h in group.clone() {
                kv_scores
                    .iter_mut()
                    .zip(&scores[layer * md.num_query_heads + h])
                    .for_each(|(a, b)| *a += b);
            }
            let kept = evict(&kv_scores, alloc.kept_counts[layer], &eviction)?;
            let slot = layer * md.num_kv_heads + kv;
            out.keys[slot].clear();
            out.values[slot].clear();
            for &j in &kept {
                out.keys[slot].extend_from_slice(&full.keys[slot][j * d..(j + 1) * d]);
                out.values[slot].extend_from_slice(&full.values[slot][j * d..(j + 1) * d]);
            }
        }
    }
    Ok(alloc)
}

fn run_overhead(w: &Workload, spec: &BenchSpec, full: &[KvCache], out: &mut [KvCache]) -> Result<(f64, BudgetAllocation)> {
    let start = Instant::now();
    let mut alloc = None;
    for (f, o) in full.iter().zip(out.iter_mut()) {
        alloc = Some(compress_one(w, spec, f, o)?);
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok((elapsed, alloc.expect("batch_size >= 1")))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn caches(w: &Workload, spec: &BenchSpec, tokens: usize) -> Result<Vec<KvCache>> {
    (0..spec.batch_size)
        .map(|_| KvCache::with_capacity(w.slots(), tokens, w.model.head_dim))
        .collect()
}

fn thread_pool(spec: &BenchSpec) -> Result<Option<rayon::ThreadPool>> {
    match spec.threads {
        Some(n) if n > 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| Error::spec("threads", e.to_string())),
        _ => Ok(None),
    }
}

pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    if spec.stats_window == 0 {
        return Err(Error::spec("stats_window", "must be positive"));
    }
    let w = Workload::build(spec)?;
    let m = spec.prompt_len;
    let tokens = m + spec.n_output_tokens;
    let pool = thread_pool(spec)?;
    let n_steps = spec.n_output_tokens - 1;

    let mut full = caches(&w, spec, tokens)?;
    let mut compressed = caches(&w, spec, tokens)?;
    let mut scratch = PrefillScratch::new(&w);
    let (mut pre, mut ovh, mut dfull, mut dcomp) = (vec![], vec![], vec![], vec![]);
    let mut alloc = None;
    for rep in 0..spec.warmup + spec.repeats {
        let p = run_prefill(&w, &mut full, &mut scratch);
        let (o, a) = run_overhead(&w, spec, &full, &mut compressed)?;
        let df = run_decode(&w, &mut full, n_steps, pool.as_ref());
        let dc = run_decode(&w, &mut compressed, n_steps, pool.as_ref());
        if rep >= spec.warmup {
            pre.push(p);
            ovh.push(o);
            dfull.push(df);
            dcomp.push(dc);
        }
        alloc = Some(a);
    }
    let alloc = alloc.expect("at least one repeat");

    let md = spec.model;
    let batch = spec.batch_size as u64;
    let full_tokens = batch * (md.num_layers * md.num_kv_heads * m) as u64;
    let kept_tokens = batch * (md.num_kv_heads * alloc.total_kept()) as u64;
    let (p, o, df, dc) = (median(pre), median(ovh), median(dfull), median(dcomp));
    let (e2e_full, e2e_comp) = (p + df, p + o + dc);
    Ok(BenchReport {
        spec: spec.clone(),
        threads: spec.threads.unwrap_or(1),
        kept_counts: alloc.kept_counts,
        prefill_time: p,
        stats_overhead_time: o,
        overhead_fraction: o / p,
        decode_time_full: df,
        decode_time_compressed: dc,
        e2e_time_full: e2e_full,
        e2e_time_compressed: e2e_comp,
        kv_bytes_full: kv_bytes(full_tokens, md.head_dim),
        kv_bytes_compressed: kv_bytes(kept_tokens, md.head_dim),
        prefill_speedup: p / (p + o),
        decode_speedup: df / dc,
        e2e_speedup: e2e_full / e2e_comp,
    })
}

/// Times the statistics pass and eviction against prefill, median of repeats.
pub fn stats_overhead(spec: &BenchSpec) -> Result<OverheadReport> {
    spec.validate()?;
    let w = Workload::build(spec)?;
    let m = spec.prompt_len;
    let rows = if spec.stats_window == 0 { 0 } else { spec.window_rows() };
    let mut full = caches(&w, spec, m)?;
    let mut compressed = caches(&w, spec, m)?;
    let mut scratch = PrefillScratch::new(&w);
    let (mut pre, mut ovh) = (vec![], vec![]);
    for rep in 0..spec.warmup + spec.repeats {
        let p = run_prefill(&w, &mut full, &mut scratch);
        let o = if rows == 0 {
            0.0
        } else {
            run_overhead(&w, spec, &full, &mut compressed)?.0
        };
        if rep >= spec.warmup {
            pre.push(p);
            ovh.push(o);
        }
    }
    let (p, o) = (median(pre), median(ovh));
    Ok(OverheadReport {
        prompt_len: m,
        window_rows: rows,
        prefill_time: p,
        overhead_time: o,
        fraction: o / p,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub batch: usize,
    pub mode: String,
    pub latency_s: f64,
    pub throughput_tok_s: f64,
}

/// Request latency and server throughput of full and compressed decoding per spec.
pub fn latency_throughput_curve(specs: &[BenchSpec]) -> Result<Vec<CurvePoint>> {
    if let Some(first) = specs.first() {
        if let Some(bad) = specs.iter().find(|s| s.prompt_len != first.prompt_len) {
            return Err(Error::spec(
                "prompt_len",
                format!("curve specs must share m, got {} and {}", first.prompt_len, bad.prompt_len),
            ));
        }
    }
    let mut out = vec![];
    for spec in specs {
        let r = run_bench(spec)?;
        out.push(CurvePoint {
            batch: spec.batch_size,
            mode: "full".into(),
            latency_s: r.e2e_time_full,
            throughput_tok_s: r.throughput_full(),
        });
        out.push(CurvePoint {
            batch: spec.batch_size,
            mode: "compressed".into(),
            latency_s: r.e2e_time_compressed,
            throughput_tok_s: r.throughput_compressed(),
        });
    }
    Ok(out)
}

/// Whether every full-cache point is matched or beaten by some compressed
/// point that is no slower and has at least its throughput.
pub fn compressed_dominates(curve: &[CurvePoint]) -> bool {
    let (full, compressed): (Vec<&CurvePoint>, Vec<&CurvePoint>) = curve.iter().partition(|p| p.mode == "full");
    full.iter().all(|f| {
        compressed
            .iter()
            .any(|c| c.latency_s <= f.latency_s && c.throughput_tok_s >= f.throughput_tok_s)
    })
}

/// Writes the curve as CSV with header `batch,mode,latency_s,throughput_tok_s`.
pub fn write_curve_csv<W: std::io::Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("curve csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(m: usize) -> BenchSpec {
        BenchSpec {
            prompt_len: m,
            n_output_tokens: 8,
            post_vision_len: 16,
            ..BenchSpec::default()
        }
    }

    #[test]
    fn exp_approximation_is_tight() {
        for i in 0..=8700 {
            let x = -(i as f32) * 0.01;
            let (a, b) = (kernels::exp_neg(x) as f64, (x as f64).exp());
            assert!((a - b).abs() <= 5e-7 * b + 1e-45, "x = {x}: {a} vs {b}");
        }
    }

    #[test]
    fn kv_bytes_closed_form() {
        assert_eq!(kv_bytes(1, 64), 512);
        assert_eq!(kv_bytes(1000, 128), 2 * 1000 * 128 * 4);
    }

    #[test]
    fn report_fields_are_consistent() {
        let r = run_bench(&small(300)).unwrap();
        assert!(r.kv_bytes_compressed <= r.kv_bytes_full);
        for t in [r.prefill_time, r.stats_overhead_time, r.decode_time_full, r.decode_time_compressed] {
            assert!(t > 0.0);
        }
        assert_eq!(r.kept_counts.len(), 2);
        let kept: usize = r.kept_counts.iter().sum();
        assert_eq!(r.kv_bytes_compressed, kv_bytes(kept as u64, 64));
        assert_eq!(r.kv_bytes_full, kv_bytes(600, 64));
        assert!(r.e2e_speedup <= r.decode_speedup || r.decode_speedup < 1.0);
        let tp = 8.0 / r.e2e_time_full;
        assert!((r.throughput_full() - tp).abs() < 1e-9 * tp);
    }

    #[test]
    fn full_budget_keeps_everything() {
        let r = run_bench(&BenchSpec {
            alpha: 1.0,
            budget: AllocationMethod::Uniform,
            ..small(200)
        })
        .unwrap();
        assert_eq!(r.kv_bytes_full, r.kv_bytes_compressed);
    }

    #[test]
    fn compressed_cache_rows_are_the_kept_rows() {
        let spec = small(256);
        let w = Workload::build(&spec).unwrap();
        let mut full = caches(&w, &spec, 256).unwrap();
        let mut comp = caches(&w, &spec, 256).unwrap();
        let mut scratch = PrefillScratch::new(&w);
        run_prefill(&w, &mut full, &mut scratch);
        let alloc = compress_one(&w, &spec, &full[0], &mut comp[0]).unwrap();
        for layer in 0..2 {
            assert_eq!(comp[0].len(layer), alloc.kept_counts[layer]);
            assert_eq!(full[0].len(layer), 256);
        }
        // The most recent prompt token is always retained and lands last.
        let d = 64;
        let last = &comp[0].keys[0][(alloc.kept_counts[0] - 1) * d..];
        assert_eq!(last, w.key(0, 0, 255));
    }

    #[test]
    fn flash_prefill_matches_naive_attention() {
        let spec = BenchSpec {
            model: BenchModel {
                num_query_heads: 2,
                head_dim: 12,
                ..BenchModel::default()
            },
            ..small(150)
        };
        let w = Workload::build(&spec).unwrap();
        let mut out = vec![0.0f32; 150 * 12];
        prefill_impl::attention_head(&w, 1, 1, 150, &mut out);
        for i in [0usize, 1, 63, 64, 100, 149] {
            let q = w.query(1, 1, i);
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    q.iter().zip(w.key(1, 0, j)).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / 12f64.sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..12 {
                let want: f64 = (0..=i).map(|j| e[j] / s * w.value(1, 0, j)[c] as f64).sum();
                assert!((out[i * 12 + c] as f64 - want).abs() < 1e-4, "row {i} col {c}");
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let cases = [
            (BenchSpec { repeats: 2, ..small(64) }, "repeats"),
            (BenchSpec { batch_size: 0, ..small(64) }, "batch_size"),
            (BenchSpec { alpha: 0.0, ..small(64) }, "alpha"),
            (BenchSpec { threads: Some(0), ..small(64) }, "threads"),
        ];
        for (s, field) in cases {
            match run_bench(&s) {
                Err(Error::InvalidSpec { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
        let huge = BenchSpec {
            prompt_len: 1 << 22,
            memory_limit_bytes: 1 << 20,
            ..small(64)
        };
        match run_bench(&huge) {
            Err(Error::SpecTooLarge { required_bytes, limit_bytes }) => {
                assert_eq!(required_bytes, huge.required_bytes());
                assert_eq!(limit_bytes, 1 << 20);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_window_has_no_overhead() {
        let r = stats_overhead(&BenchSpec {
            stats_window: 0,
            ..small(128)
        })
        .unwrap();
        assert_eq!(r.window_rows, 0);
        assert_eq!(r.overhead_time, 0.0);
        assert_eq!(r.fraction, 0.0);
    }

    #[test]
    fn curve_has_two_points_per_spec_and_csv_header() {
        let curve = latency_throughput_curve(&[small(128)]).unwrap();
        assert_eq!(curve.len(), 2);
        let mut buf = vec![];
        write_curve_csv(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("batch,mode,latency_s,throughput_tok_s\n"));
        assert!(latency_throughput_curve(&[small(128), small(64)]).is_err());
    }

    #[test]
    fn dominance_check() {
        let pt = |mode: &str, l: f64, t: f64| CurvePoint {
            batch: 1,
            mode: mode.into(),
            latency_s: l,
            throughput_tok_s: t,
        };
        assert!(compressed_dominates(&[pt("full", 2.0, 10.0), pt("compressed", 1.0, 20.0)]));
        assert!(!compressed_dominates(&[pt("full", 2.0, 10.0), pt("compressed", 3.0, 20.0)]));
    }
}
