use crate::trace::{generate_trace, AttentionTrace, GenSpec, LayerTensors, ModalityLayout, Tensor3, TraceHeader};

/// One layer, one head, every query and key identical: uniform causal rows.
pub fn constant_trace(m: usize, n_dec: usize) -> AttentionTrace {
    let header = TraceHeader {
        num_layers: 1,
        num_query_heads: 1,
        num_kv_heads: 1,
        head_dim: 2,
        prompt_len: m,
        post_vision_len: 1,
        decode_len: n_dec,
        seed: 0,
    };
    let s = m + n_dec;
    let layer = LayerTensors {
        queries: Tensor3::new([1, s, 2], vec![0.5; 2 * s]).unwrap(),
        keys: Tensor3::new([1, s, 2], vec![0.25; 2 * s]).unwrap(),
    };
    let layout = ModalityLayout::new(m, 0, 1).unwrap();
    AttentionTrace::new(header, layout, vec![layer]).unwrap()
}

/// Single-head trace with `head_dim = 1`, unit queries and the given scalar
/// keys, so row `i` has logits `keys[0..=i]`.
pub fn scalar_key_trace(keys: &[f32], tau: usize, n_dec: usize) -> AttentionTrace {
    let s = keys.len();
    let m = s - n_dec;
    let header = TraceHeader {
        num_layers: 1,
        num_query_heads: 1,
        num_kv_heads: 1,
        head_dim: 1,
        prompt_len: m,
        post_vision_len: tau,
        decode_len: n_dec,
        seed: 0,
    };
    let layer = LayerTensors {
        queries: Tensor3::new([1, s, 1], vec![1.0; s]).unwrap(),
        keys: Tensor3::new([1, s, 1], keys.to_vec()).unwrap(),
    };
    let layout = ModalityLayout::new(m, 0, tau).unwrap();
    AttentionTrace::new(header, layout, vec![layer]).unwrap()
}

pub fn random_trace(seed: u64, m: usize) -> AttentionTrace {
    generate_trace(&GenSpec {
        num_layers: 2,
        num_query_heads: 4,
        num_kv_heads: 2,
        head_dim: 16,
        prompt_len: m,
        post_vision_len: 16,
        decode_len: 4,
        seed,
        ..GenSpec::default()
    })
    .unwrap()
    .trace
}
