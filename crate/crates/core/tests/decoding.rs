mod common;

use common::*;
use edgeformer::decode::{beam_search, greedy, sequence_logprob, DecodeConfig, DecodePath};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn beam_one_equals_greedy_on_100_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..100 {
        let m = random_model(seed);
        let src = random_source(&mut rng);
        let g = greedy(&m, &src, 12, DecodePath::Incremental).unwrap();
        let cfg = DecodeConfig {
            beam: 1,
            max_len: 12,
            alpha: 0.6,
        };
        let b = beam_search(&m, &src, &cfg, DecodePath::Incremental).unwrap();
        assert_eq!(b[0].tokens, g.tokens, "model {seed}");
        assert_eq!(b[0].score, g.score, "model {seed}");
    }
}

#[test]
fn cache_equals_recompute_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..100 {
        let m = random_model(seed);
        let src = random_source(&mut rng);
        let a = greedy(&m, &src, 12, DecodePath::Incremental).unwrap();
        let b = greedy(&m, &src, 12, DecodePath::Recompute).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.score.to_bits(), b.score.to_bits());
        if seed % 5 == 0 {
            let cfg = DecodeConfig {
                beam: 4,
                max_len: 10,
                alpha: 0.6,
            };
            let a = beam_search(&m, &src, &cfg, DecodePath::Incremental).unwrap();
            let b = beam_search(&m, &src, &cfg, DecodePath::Recompute).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn full_width_beam_equals_brute_force() {
    for seed in 0..20 {
        let m = toy(seed);
        let src = vec![1, 2, 2, 4];
        let mut all = Vec::new();
        enumerate(&mut Vec::new(), 3, 4, &mut all);
        assert_eq!(all.len(), 15);
        for alpha in [0.0, 0.6] {
            let mut scored: Vec<(f64, f64, Vec<usize>)> = all
                .iter()
                .map(|s| {
                    let lp = sequence_logprob(&m, &src, s).unwrap();
                    (lp / (s.len() as f64).powf(alpha), lp, s.clone())
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.2.cmp(&b.2)));
            let cfg = DecodeConfig {
                beam: 27,
                max_len: 3,
                alpha,
            };
            let hyps = beam_search(&m, &src, &cfg, DecodePath::Incremental).unwrap();
            assert_eq!(hyps.len(), 15);
            for (h, (norm, lp, toks)) in hyps.iter().zip(&scored) {
                assert_eq!(&h.tokens, toks, "seed {seed} alpha {alpha}");
                assert!((h.score - lp).abs() < 1e-9);
                assert!((h.normalized - norm).abs() < 1e-9);
                assert_eq!(h.truncated, *toks.last().unwrap() != 4);
            }
        }
    }
}

#[test]
fn wider_beam_never_scores_below_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..100 {
        let m = random_model(seed);
        let src = random_source(&mut rng);
        let g = greedy(&m, &src, 12, DecodePath::Incremental).unwrap();
        let cfg = DecodeConfig {
            beam: 5,
            max_len: 12,
            alpha: 0.0,
        };
        let b = beam_search(&m, &src, &cfg, DecodePath::Incremental).unwrap();
        assert!(
            b[0].score >= g.score - 1e-9,
            "model {seed}: beam {} < greedy {}",
            b[0].score,
            g.score
        );
    }
}
