use edgeformer::ablate::ffn_load_entries;
use edgeformer::checkpoint::{from_bytes, to_bytes};
use edgeformer::tensor::matmul;
use edgeformer::train::{Task, TaskKind, TaskSpec, TrainConfig};
use edgeformer::{
    build_plan, count_params, AdaptSpec, DecoderStyle, LoraBlock, Model, ModelConfig, ParamRole,
    PlanSpec, Tensor,
};
use proptest::prelude::*;

fn sizes(m: &Model<f32>, keep: impl Fn(ParamRole) -> bool) -> u64 {
    m.store()
        .iter()
        .filter(|(_, p)| keep(p.role))
        .map(|(_, p)| p.value.len() as u64)
        .sum()
}

/// The closed-form counts agree with what the model actually allocates.
fn check_counts(
    config: &ModelConfig,
    spec: &PlanSpec,
    adapt: &AdaptSpec,
) -> Result<(), TestCaseError> {
    let Ok(plan) = build_plan(spec, config) else {
        return Ok(());
    };
    let r = count_params(config, &plan, adapt);
    let mut m = Model::<f32>::new(config.clone(), plan, 1).unwrap();
    m.apply(adapt, 2).unwrap();
    prop_assert_eq!(r.params_formula, sizes(&m, |r| r == ParamRole::Weight));
    prop_assert_eq!(r.params_lora, sizes(&m, |r| r == ParamRole::Lora));
    prop_assert_eq!(r.params_prompt, sizes(&m, |r| r == ParamRole::Prompt));
    prop_assert_eq!(r.params_total, sizes(&m, |r| r != ParamRole::Embedding));
    prop_assert_eq!(r.params_embedding, sizes(&m, |r| r == ParamRole::Embedding));
    Ok(())
}

fn arb_config() -> impl Strategy<Value = ModelConfig> {
    (
        1usize..=12,
        1usize..=4,
        prop::sample::select(vec![8usize, 16, 24]),
        1usize..=40,
        1usize..=12,
        any::<bool>(),
    )
        .prop_map(|(m, n, d, f, df, interleaved)| ModelConfig {
            encoder_layers: m,
            decoder_layers: n,
            model_dim: d,
            heads: 2,
            enc_ffn_dim: f,
            dec_ffn_dim: df,
            vocab_size: 12,
            max_len: 16,
            decoder_style: if interleaved {
                DecoderStyle::Interleaved
            } else {
                DecoderStyle::Vanilla
            },
        })
}

fn arb_plan() -> impl Strategy<Value = PlanSpec> {
    prop_oneof![
        Just(PlanSpec::Full),
        Just(PlanSpec::Universal),
        Just(PlanSpec::SharedEncoder),
        Just(PlanSpec::SharedDecoder),
        (1usize..=4).prop_map(|k| PlanSpec::Edgeformer {
            ffn_groups: Some(k),
            ffn_assignment: None,
        }),
    ]
}

fn arb_adapt() -> impl Strategy<Value = AdaptSpec> {
    (
        any::<bool>(),
        prop::option::of(1usize..8),
        prop::option::of(0usize..4),
    )
        .prop_map(|(bias, lora_rank, prompt_len)| AdaptSpec {
            bias,
            lora_rank,
            prompt_len,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn formula_counts_match_allocation(config in arb_config(), spec in arb_plan(), adapt in arb_adapt()) {
        check_counts(&config, &spec, &adapt)?;
    }

    #[test]
    fn lora_block_represents_any_update(d in 1usize..8, seed in any::<u64>()) {
        let vals = |n: usize, k: u64| -> Vec<f64> {
            (0..n).map(|i| ((seed.wrapping_mul(31).wrapping_add(k * 977 + i as u64 * 131) % 2001) as f64 - 1000.0) / 500.0).collect()
        };
        let delta = Tensor::new(&[d, d], vals(d * d, 1)).unwrap();
        let w = Tensor::new(&[d, d], vals(d * d, 2)).unwrap();
        let x = Tensor::new(&[3, d], vals(3 * d, 3)).unwrap();
        let block = LoraBlock::from_delta(&delta).unwrap();
        prop_assert_eq!(block.rank(), d);
        prop_assert_eq!(block.delta(), delta.clone());
        let mut merged = w.clone();
        merged.add_assign(&delta);
        let want = matmul(&x, &merged).unwrap();
        let got = block.apply(&x, &w).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), adapt in arb_adapt(), step in any::<u32>()) {
        let mut m = Model::<f32>::build(&ModelConfig::mini(), &PlanSpec::edgeformer(), seed).unwrap();
        m.apply(&adapt, seed).unwrap();
        let bytes = to_bytes(&m, step as u64, None);
        let ck = from_bytes(&bytes).unwrap();
        prop_assert_eq!(ck.header.step, step as u64);
        prop_assert_eq!(to_bytes(&ck.model, step as u64, None), bytes);
        let src = [3, 4, 5, 15];
        let a = m.forward(&src, &[14, 3]).unwrap();
        let b = ck.model.forward(&src, &[14, 3]).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn task_examples_are_pure(seed in any::<u64>(), index in any::<u64>(), kind in 0usize..4) {
        let kinds = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Cipher, TaskKind::SpanInfill];
        let spec = TaskSpec::new(kinds[kind], 2, 10);
        let a = Task::new(spec.clone(), 16, 32, seed).unwrap();
        let b = Task::new(spec, 16, 32, seed).unwrap();
        let first = a.example(index);
        let _ = a.example(index.wrapping_add(1));
        prop_assert_eq!(a.example(index), first.clone());
        prop_assert_eq!(b.example(index), first);
    }

    #[test]
    fn schedule_warms_up_then_decays(peak in 1e-5f64..1e-1, warmup in 1u64..5000, t in 1u64..100_000) {
        let s = TrainConfig { lr: peak, warmup, ..TrainConfig::default() }.schedule();
        let lr = s.lr(t);
        prop_assert!(lr > 0.0 && lr <= peak * (1.0 + 1e-12));
        if t < warmup {
            prop_assert!((lr - peak * t as f64 / warmup as f64).abs() < 1e-12 * peak);
            prop_assert!(s.lr(t + 1) > lr);
        } else {
            prop_assert!((lr - peak * (warmup as f64 / t as f64).sqrt()).abs() < 1e-12 * peak);
            prop_assert!(s.lr(t + 1) <= lr);
        }
        prop_assert!((s.lr(warmup) - peak).abs() < 1e-12 * peak);
    }
}

#[test]
fn ablation_configs_match_allocation() {
    let base = ModelConfig {
        vocab_size: 32,
        ..ModelConfig::edgeformer(512)
    };
    for e in ffn_load_entries(&base) {
        check_counts(e.model.as_ref().unwrap(), &e.plan, &AdaptSpec::default()).unwrap();
    }
}

#[test]
fn presets_match_allocation_at_full_width() {
    let small_vocab = |c: ModelConfig| ModelConfig {
        vocab_size: 32,
        ..c
    };
    let cases = [
        (small_vocab(ModelConfig::vanilla(6, 6, 384)), PlanSpec::Full),
        (
            small_vocab(ModelConfig::vanilla(12, 2, 512)),
            PlanSpec::Universal,
        ),
        (
            small_vocab(ModelConfig::edgeformer(512)),
            PlanSpec::edgeformer(),
        ),
    ];
    let adapts = [
        AdaptSpec::default(),
        AdaptSpec {
            bias: true,
            lora_rank: Some(32),
            prompt_len: Some(8),
        },
    ];
    for (c, p) in &cases {
        for a in &adapts {
            check_counts(c, p, a).unwrap();
        }
    }
}

fn random_inputs(n: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let task = Task::new(TaskSpec::new(TaskKind::SpanInfill, 1, 12), 16, 32, 9).unwrap();
    task.examples(0, n)
        .into_iter()
        .map(|e| (e.src, e.tgt))
        .collect()
}

fn same_outputs(a: &Model<f32>, b: &Model<f32>, inputs: &[(Vec<usize>, Vec<usize>)]) -> bool {
    let bos = a.specials().bos;
    inputs.iter().all(|(src, tgt)| {
        let tin = edgeformer::model::teacher_input(tgt, bos);
        let x = a.forward(src, &tin).unwrap();
        let y = b.forward(src, &tin).unwrap();
        x.data()
            .iter()
            .zip(y.data())
            .all(|(p, q)| p.to_bits() == q.to_bits())
    })
}

#[test]
fn adaptation_is_identity_at_application() {
    let inputs = random_inputs(50);
    for seed in 0..3 {
        let base =
            Model::<f32>::build(&ModelConfig::mini(), &PlanSpec::edgeformer(), seed).unwrap();
        for spec in [
            AdaptSpec {
                lora_rank: Some(4),
                ..AdaptSpec::default()
            },
            AdaptSpec {
                prompt_len: Some(0),
                ..AdaptSpec::default()
            },
            AdaptSpec {
                bias: true,
                ..AdaptSpec::default()
            },
        ] {
            let mut m = base.clone();
            m.apply(&spec, seed + 100).unwrap();
            assert!(same_outputs(&base, &m, &inputs), "{spec:?}");
        }
    }
}
