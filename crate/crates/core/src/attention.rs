//! Causal attention: a dense reference path and a tiled three-pass statistics
//! pipeline that never materialises the attention matrix.
//!
//! Numerics shared by both paths: logits are `q . k / sqrt(d)` accumulated in
//! f64 and rounded to f32, softmax subtracts the row max, exponentials are
//! f32, every sum is f64.
//!
//! The tiled pipeline runs three passes:
//!
//! 1. per query tile, stream key tiles and keep an online max/sum per row;
//! 2. per key tile, stream query tiles, recompute the softmax from the stored
//!    row max/sum and accumulate column scores plus per-query-tile partial
//!    counts of entries below `p * row_max`;
//! 3. sum the partial counts.
//!
//! Working memory is one `query_tile x key_tile` logit block, the O(window)
//! row statistics, and O(keys) column accumulators per query tile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::AttentionTrace;

/// Half-open range of query rows `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryWindow {
    pub start: usize,
    pub end: usize,
}

impl QueryWindow {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(Error::spec("window", format!("empty query window [{start}, {end})")));
        }
        Ok(Self { start, end })
    }

    /// Every prompt row.
    pub fn prompt(trace: &AttentionTrace) -> Self {
        Self {
            start: 0,
            end: trace.prompt_len(),
        }
    }

    /// The last `rows` prompt rows (clamped to the prompt).
    pub fn last_prompt_rows(trace: &AttentionTrace, rows: usize) -> Result<Self> {
        let m = trace.prompt_len();
        Self::new(m - rows.min(m), m)
    }

    /// Decoding rows `m .. m + n_dec`.
    pub fn decoding(trace: &AttentionTrace) -> Result<Self> {
        if trace.header().decode_len == 0 {
            return Err(Error::NoDecodingRows);
        }
        Self::new(trace.prompt_len(), trace.seq_len())
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Keys visible to at least one row of the window.
    pub fn num_keys(&self) -> usize {
        self.end
    }

    fn check(&self, trace: &AttentionTrace) -> Result<()> {
        if self.is_empty() {
            return Err(Error::spec("window", format!("empty query window [{}, {})", self.start, self.end)));
        }
        if self.end > trace.seq_len() {
            return Err(Error::OutOfRange {
                what: "query window end",
                index: self.end,
                bound: trace.seq_len(),
            });
        }
        Ok(())
    }
}

/// Tile sizes for the streaming pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub query_tile: usize,
    pub key_tile: usize,
}

impl Default for Tiling {
    fn default() -> Self {
        Self {
            query_tile: 64,
            key_tile: 64,
        }
    }
}

impl Tiling {
    pub fn square(tile: usize) -> Self {
        Self {
            query_tile: tile,
            key_tile: tile,
        }
    }
}

pub(crate) fn check_threshold(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidThreshold(p))
    }
}

#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] as f64 * y[i] as f64;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x as f64 * *y as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn logit(q: &[f32], k: &[f32], scale: f64) -> f32 {
    (dot_f64(q, k) * scale) as f32
}

fn logit_scale(trace: &AttentionTrace) -> f64 {
    1.0 / (trace.header().head_dim as f64).sqrt()
}

/// Causal softmax rows for a query window, materialised densely.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseRows {
    pub window: QueryWindow,
    /// Row width; keys `0..window.end`.
    pub num_keys: usize,
    data: Vec<f64>,
}

impl DenseRows {
    /// Row for query position `window.start + offset`; zero past the causal frontier.
    pub fn row(&self, offset: usize) -> &[f64] {
        &self.data[offset * self.num_keys..(offset + 1) * self.num_keys]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.num_keys)
    }
}

/// Reference causal softmax for one (layer, query head) over a query window.
pub fn dense_attention_rows(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    window: QueryWindow,
) -> Result<DenseRows> {
    trace.check_head(layer, head)?;
    window.check(trace)?;
    let kv = trace.header().kv_head_of(head);
    let scale = logit_scale(trace);
    let num_keys = window.num_keys();
    let mut data = vec![0.0f64; window.len() * num_keys];
    let mut logits = Vec::with_capacity(num_keys);
    for (offset, i) in (window.start..window.end).enumerate() {
        let q = trace.query_row(layer, head, i);
        logits.clear();
        logits.extend((0..=i).map(|j| logit(q, trace.key_row(layer, kv, j), scale)));
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let row = &mut data[offset * num_keys..(offset + 1) * num_keys];
        let mut sum = 0.0f64;
        for (o, l) in row.iter_mut().zip(&logits) {
            let e = (l - max).exp();
            *o = e as f64;
            sum += e as f64;
        }
        row[..=i].iter_mut().for_each(|v| *v /= sum);
    }
    Ok(DenseRows { window, num_keys, data })
}

/// Softmax of query row `pos` against the first `num_keys` keys only.
pub fn prefix_softmax(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    pos: usize,
    num_keys: usize,
) -> Result<Vec<f64>> {
    trace.check_head(layer, head)?;
    let s = trace.seq_len();
    if pos >= s {
        return Err(Error::OutOfRange {
            what: "query position",
            index: pos,
            bound: s,
        });
    }
    if num_keys == 0 || num_keys > pos + 1 {
        return Err(Error::OutOfRange {
            what: "key prefix",
            index: num_keys,
            bound: pos + 1,
        });
    }
    let kv = trace.header().kv_head_of(head);
    let scale = logit_scale(trace);
    let q = trace.query_row(layer, head, pos);
    let logits: Vec<f32> = (0..num_keys)
        .map(|j| logit(q, trace.key_row(layer, kv, j), scale))
        .collect();
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut row: Vec<f64> = logits.iter().map(|l| (l - max).exp() as f64).collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum);
    Ok(row)
}

/// Row and column statistics of the causal softmax over a query window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub window: QueryWindow,
    /// Pre-exponentiation max logit per window row.
    pub row_max: Vec<f32>,
    /// Post-exponentiation sum per window row, `sum_j exp(l_ij - row_max_i)`.
    pub row_sum: Vec<f64>,
    /// Per key column, post-softmax attention summed over the window rows.
    pub col_score: Vec<f64>,
    /// Per key column, causal entries strictly below `p` times their row's max probability.
    pub below_threshold_count: Vec<u64>,
    /// Per key column, causal entries in the window.
    pub causal_entry_count: Vec<u64>,
}

impl AttentionStats {
    pub fn total_below(&self) -> u64 {
        self.below_threshold_count.iter().sum()
    }

    pub fn total_causal(&self) -> u64 {
        self.causal_entry_count.iter().sum()
    }
}

/// Streaming statistics with the default tiling.
pub fn streaming_stats(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    window: QueryWindow,
    p: f64,
) -> Result<AttentionStats> {
    streaming_stats_tiled(trace, layer, head, window, p, Tiling::default())
}

pub fn streaming_stats_tiled(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    window: QueryWindow,
    p: f64,
    tiling: Tiling,
) -> Result<AttentionStats> {
    check_threshold(p)?;
    trace.check_head(layer, head)?;
    window.check(trace)?;
    if tiling.query_tile == 0 || tiling.key_tile == 0 {
        return Err(Error::spec("tiling", "tile sizes must be positive"));
    }
    let kv = trace.header().kv_head_of(head);
    let scale = logit_scale(trace);
    let (tq, tk) = (tiling.query_tile, tiling.key_tile);
    let num_keys = window.num_keys();
    let rows = window.len();
    let q_tiles = rows.div_ceil(tq);

    let query = |i: usize| trace.query_row(layer, head, i);
    let key = |j: usize| trace.key_row(layer, kv, j);
    let mut block = vec![0.0f32; tq * tk];

    // Pass 1: online softmax row statistics.
    let mut row_max = vec![f32::NEG_INFINITY; rows];
    let mut row_sum = vec![0.0f64; rows];
    for qt in 0..q_tiles {
        let r0 = qt * tq;
        let r1 = (r0 + tq).min(rows);
        let last_query = window.start + r1 - 1;
        let mut k0 = 0;
        while k0 <= last_query {
            let k1 = (k0 + tk).min(last_query + 1);
            for r in r0..r1 {
                let i = window.start + r;
                if i < k0 {
                    continue;
                }
                let kend = k1.min(i + 1);
                let q = query(i);
                let blk = &mut block[(r - r0) * tk..(r - r0) * tk + (kend - k0)];
                let mut tile_max = f32::NEG_INFINITY;
                for (b, j) in blk.iter_mut().zip(k0..kend) {
                    *b = logit(q, key(j), scale);
                    tile_max = tile_max.max(*b);
                }
                let new_max = row_max[r].max(tile_max);
                let rescale = if row_sum[r] == 0.0 {
                    0.0
                } else {
                    ((row_max[r] - new_max) as f64).exp()
                };
                let tile_sum: f64 = blk.iter().map(|l| (l - new_max).exp() as f64).sum();
                row_sum[r] = row_sum[r] * rescale + tile_sum;
                row_max[r] = new_max;
            }
            k0 = k1;
        }
    }

    // Pass 2: column statistics, partial below-threshold counts per query tile.
    let mut col_score = vec![0.0f64; num_keys];
    let mut partial = vec![0u64; q_tiles * num_keys];
    let mut k0 = 0;
    while k0 < num_keys {
        let k1 = (k0 + tk).min(num_keys);
        for qt in 0..q_tiles {
            let r0 = qt * tq;
            let r1 = (r0 + tq).min(rows);
            if window.start + r1 - 1 < k0 {
                continue;
            }
            let counts = &mut partial[qt * num_keys..(qt + 1) * num_keys];
            for r in r0..r1 {
                let i = window.start + r;
                if i < k0 {
                    continue;
                }
                let kend = k1.min(i + 1);
                let q = query(i);
                let (m, s) = (row_max[r], row_sum[r]);
                let cut = p * (1.0 / s);
                for j in k0..kend {
                    let prob = (logit(q, key(j), scale) - m).exp() as f64 / s;
                    col_score[j] += prob;
                    if prob < cut {
                        counts[j] += 1;
                    }
                }
            }
        }
        k0 = k1;
    }

    // Pass 3: reduce partial counts.
    let mut below_threshold_count = vec![0u64; num_keys];
    for counts in partial.chunks_exact(num_keys) {
        for (acc, c) in below_threshold_count.iter_mut().zip(counts) {
            *acc += c;
        }
    }

    let causal_entry_count = (0..num_keys)
        .map(|j| (window.end - window.start.max(j)) as u64)
        .collect();

    Ok(AttentionStats {
        window,
        row_max,
        row_sum,
        col_score,
        below_threshold_count,
        causal_entry_count,
    })
}
