use proptest::prelude::*;

use vlcache::attention::{dense_attention_rows, streaming_stats_tiled, QueryWindow, Tiling};
use vlcache::eval::{cache_hit_rate, contribution, coverage, EvalWindow, OracleRows};
use vlcache::scoring::{ScoringPolicy, StatsSource};
use vlcache::trace::{decode_trace, encode_trace, generate_trace, AttentionTrace, GenSpec, Modality};

fn trace(seed: u64, m: usize, tau: usize, pre: usize, noise: f64) -> AttentionTrace {
    generate_trace(&GenSpec {
        num_layers: 2,
        num_query_heads: 4,
        num_kv_heads: 2,
        head_dim: 8,
        prompt_len: m,
        post_vision_len: tau,
        pre_vision_len: pre,
        decode_len: 3,
        seed,
        noise_scale: noise,
        ..GenSpec::default()
    })
    .unwrap()
    .trace
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiling_does_not_change_statistics(
        seed in any::<u64>(),
        m in 24usize..160,
        tq in 1usize..80,
        tk in 1usize..80,
        head in 0usize..4,
    ) {
        let t = trace(seed, m, 8, 0, 0.1);
        let w = QueryWindow::new(0, t.seq_len()).unwrap();
        let a = streaming_stats_tiled(&t, 1, head, w, 0.01, Tiling { query_tile: tq, key_tile: tk }).unwrap();
        let b = streaming_stats_tiled(&t, 1, head, w, 0.01, Tiling::square(64)).unwrap();
        prop_assert_eq!(&a.below_threshold_count, &b.below_threshold_count);
        prop_assert_eq!(&a.row_max, &b.row_max);
        // f32 exponentials taken against a running max differ at the ulp level.
        for (x, y) in a.col_score.iter().zip(&b.col_score) {
            prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
        for (x, y) in a.row_sum.iter().zip(&b.row_sum) {
            prop_assert!((x - y).abs() <= 1e-6 * y);
        }
        let dense = dense_attention_rows(&t, 1, head, w).unwrap();
        for (o, row) in dense.rows().enumerate() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9, "row {} sums to {}", o, s);
        }
    }

    #[test]
    fn trace_bytes_round_trip(seed in any::<u64>(), m in 20usize..80, tau in 0usize..10) {
        let t = trace(seed, m, tau, 0, 0.3);
        let bytes = encode_trace(&t).unwrap();
        prop_assert_eq!(decode_trace(&bytes).unwrap(), t);
    }

    #[test]
    fn hit_rate_is_a_fraction(seed in any::<u64>(), m in 24usize..128, k_frac in 0.0f64..1.0, policy in 0usize..4) {
        let t = trace(seed, m, 6, 0, 0.5);
        let k = ((k_frac * m as f64) as usize).clamp(1, m);
        let policy = [
            ScoringPolicy::PostVision,
            ScoringPolicy::AccumulatedAttention,
            ScoringPolicy::SlidingWindow { window: 4 },
            ScoringPolicy::streaming_for_budget(k),
        ][policy];
        let h = cache_hit_rate(&t, 0, 1, &policy, k, &StatsSource::default(), OracleRows::AllDecoding).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        if k == m {
            prop_assert_eq!(h, 1.0);
        }
    }

    #[test]
    fn modality_shares_are_complementary(seed in any::<u64>(), m in 40usize..128, pre in 0usize..12) {
        let t = trace(seed, m, 8, pre, 1.0);
        let w = EvalWindow::decoding(&t, 0.2).unwrap();
        let c: f64 = Modality::ALL.iter().map(|&md| contribution(&t, 1, 3, &w, md, 0.01).unwrap()).sum();
        let v: f64 = Modality::ALL.iter().map(|&md| coverage(&t, 1, 3, &w, md).unwrap()).sum();
        prop_assert!((c - 1.0).abs() < 1e-9);
        prop_assert!((v - 1.0).abs() < 1e-9);
    }
}
