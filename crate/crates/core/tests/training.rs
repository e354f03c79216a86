mod common;

use common::{random, rng};
use proptest::prelude::*;
use qbye_core::data::TrainingExample;
use qbye_core::encoders::{EncoderConfig, LicoBlockSpec, LiconetConfig};
use qbye_core::losses::{HeadDims, HybridLossConfig, WordLoss};
use qbye_core::model::{KwsModel, ModelConfig};
use qbye_core::params::{Group, Kind};
use qbye_core::pooling::{GapConfig, PoolingConfig};
use qbye_core::training::{cyclical_lr, train_step, Adam, TrainConfig};
use qbye_core::{Error, Tensor};

/// Integer-phase triangular2 schedule.
fn lr_oracle(step: u64, cfg: &TrainConfig) -> f64 {
    let h = cfg.half_cycle_steps;
    let (cycle, pos) = (step / (2 * h), step % (2 * h));
    let rise = if pos <= h { pos } else { 2 * h - pos };
    cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (rise as f64 / h as f64) / 2f64.powi(cycle as i32)
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(cyclical_lr(0, &cfg), 1e-8);
    assert!((cyclical_lr(20_000, &cfg) - 1e-3).abs() < 1e-18);
    assert_eq!(cyclical_lr(40_000, &cfg), 1e-8);
    let second_peak = cyclical_lr(60_000, &cfg);
    assert!((second_peak - 5.000e-4).abs() < 1e-7, "{second_peak}");
    assert!((cyclical_lr(100_000, &cfg) - (1e-8 + (1e-3 - 1e-8) / 4.0)).abs() < 1e-18);
    assert!((cyclical_lr(10_000, &cfg) - (1e-8 + 1e-3) / 2.0).abs() < 1e-18);
}

proptest! {
    #[test]
    fn schedule_matches_oracle_and_bounds(step in 0u64..400_000, h in 1u64..50_000) {
        let cfg = TrainConfig { half_cycle_steps: h, ..TrainConfig::default() };
        let lr = cyclical_lr(step, &cfg);
        prop_assert!(lr >= cfg.lr_min && lr <= cfg.lr_max);
        prop_assert!((lr - lr_oracle(step, &cfg)).abs() <= 1e-15);
        // Continuous: one step moves at most one slope unit.
        let slope = (cfg.lr_max - cfg.lr_min) / h as f64;
        prop_assert!((cyclical_lr(step + 1, &cfg) - lr).abs() <= slope * (1.0 + 1e-9));
    }

    #[test]
    fn schedule_is_linear_between_corners(cycle in 0u64..6, a in 0u64..20_000, b in 0u64..20_000) {
        let cfg = TrainConfig::default();
        let start = cycle * 40_000;
        let (a, b) = (start + a.min(b), start + a.max(b));
        let mid = (a + b) / 2;
        if (a + b) % 2 == 0 {
            let avg = (cyclical_lr(a, &cfg) + cyclical_lr(b, &cfg)) / 2.0;
            prop_assert!((cyclical_lr(mid, &cfg) - avg).abs() < 1e-15);
        }
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig {
        lr_min: 1e-3,
        lr_max: 1e-3,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        half_cycle_steps: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        beta1: 1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        grad_clip: Some(0.0),
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
}

fn tiny_model(loss: &HybridLossConfig, seed: u64) -> KwsModel {
    let cfg = ModelConfig {
        encoder: EncoderConfig::Liconet(LiconetConfig {
            input_dim: 8,
            stem_channels: 6,
            kernel_size: 3,
            expansion_factor: 2,
            blocks: vec![
                LicoBlockSpec {
                    channels: 6,
                    stride: 2,
                    residual: false,
                },
                LicoBlockSpec {
                    channels: 6,
                    stride: 1,
                    residual: true,
                },
            ],
        }),
        pooling: PoolingConfig::Gap(GapConfig {
            pooling_ratios: [0.71, 0.86, 0.71],
            projection_dim: 8,
            spectral_groups: 4,
            temporal_chunk: 2,
            fused_dim: 6,
        }),
        embedding_dim: 6,
        eval_norm: Default::default(),
    };
    KwsModel::new(
        &cfg,
        loss,
        HeadDims {
            words: 3,
            speakers: 2,
            phonemes: 4,
        },
        seed,
    )
    .unwrap()
}

fn examples(n: usize) -> Vec<TrainingExample> {
    (0..n)
        .map(|i| TrainingExample {
            id: format!("ex{i}"),
            features: random(&mut rng(i as u64 + 40), 16, 8, 1.0),
            y_word: i % 3,
            y_speaker: Some(i % 2),
            y_phoneme: (0..16).map(|f| (f + i) % 4).collect(),
        })
        .collect()
}

fn run(loss: &HybridLossConfig, steps: usize) -> (Vec<f64>, KwsModel) {
    let cfg = TrainConfig {
        half_cycle_steps: 4,
        lr_max: 1e-2,
        ..TrainConfig::default()
    };
    let mut model = tiny_model(loss, 5);
    let mut adam = Adam::new(&model.store, &cfg);
    let data = examples(6);
    let mut losses = Vec::new();
    for s in 0..steps {
        let batch: Vec<&TrainingExample> = data.iter().skip(s % 2 * 3).take(3).collect();
        losses.push(
            train_step(&mut model, &mut adam, &batch, loss, &cfg)
                .unwrap()
                .loss
                .total,
        );
    }
    (losses, model)
}

#[test]
fn training_is_bitwise_reproducible() {
    let (a, ma) = run(&HybridLossConfig::default(), 5);
    let (b, mb) = run(&HybridLossConfig::default(), 5);
    assert_eq!(a, b);
    assert_eq!(ma.store, mb.store);
}

#[test]
fn zero_weights_are_word_training() {
    let zeroed = HybridLossConfig {
        speaker_weight: 0.0,
        phoneme_weight: 0.0,
        ..HybridLossConfig::default()
    };
    let (a, ma) = run(&zeroed, 4);
    let (b, mb) = run(&HybridLossConfig::single_task(WordLoss::SoftTriple), 4);
    assert_eq!(a, b);
    // Untouched heads keep their initial values.
    let init = tiny_model(&zeroed, 5);
    for id in ma.store.ids() {
        let e = ma.store.entry(id);
        if matches!(e.group, Group::SpeakerHead | Group::PhonemeHead) {
            assert_eq!(e.value, init.store.entry(id).value, "{}", e.name);
        }
    }
    assert_eq!(ma.store, mb.store);
}

#[test]
fn steps_update_parameters_and_running_statistics() {
    let loss = HybridLossConfig::default();
    let init = tiny_model(&loss, 5);
    let (losses, model) = run(&loss, 3);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
    let changed = |kind: Kind| {
        init.store
            .ids()
            .filter(|&id| init.store.entry(id).kind == kind)
            .any(|id| init.store.get(id) != model.store.get(id))
    };
    assert!(changed(Kind::Trainable));
    assert!(changed(Kind::Buffer), "batch-norm running statistics move");
}

#[test]
fn adam_matches_scalar_oracle() {
    let cfg = TrainConfig::default();
    let model = tiny_model(&HybridLossConfig::default(), 1);
    let mut store = model.store.clone();
    let mut adam = Adam::new(&store, &cfg);
    let grads: Vec<Tensor> = store
        .entries()
        .iter()
        .map(|e| e.value.map(|v| 0.3 * v - 0.01))
        .collect();
    let id = store
        .ids()
        .find(|&id| store.entry(id).kind == Kind::Trainable)
        .unwrap();
    let (p0, g) = (store.get(id).data()[0], grads[id.0].data()[0]);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for t in 1..=3 {
        adam.update(&mut store, &grads, 1e-3);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let (mh, vh) = (m / (1.0 - 0.9f64.powi(t)), v / (1.0 - 0.999f64.powi(t)));
        p -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        assert!((store.get(id).data()[0] - p).abs() < 1e-15, "step {t}");
    }
    assert_eq!(adam.step, 3);
    for bid in store
        .ids()
        .filter(|&id| store.entry(id).kind == Kind::Buffer)
    {
        assert_eq!(
            store.get(bid),
            model.store.get(bid),
            "buffers are not optimised"
        );
    }
}

#[test]
fn gradient_clip_bounds_the_applied_norm() {
    let loss = HybridLossConfig::default();
    let cfg = TrainConfig {
        grad_clip: Some(1e-6),
        ..TrainConfig::default()
    };
    let mut model = tiny_model(&loss, 2);
    let mut adam = Adam::new(&model.store, &cfg);
    let data = examples(2);
    let batch: Vec<&TrainingExample> = data.iter().collect();
    let stats = train_step(&mut model, &mut adam, &batch, &loss, &cfg).unwrap();
    assert!(stats.grad_norm > 1e-6, "reported norm is before clipping");
    let g = |v: &Tensor| v.data().iter().map(|x| x * x).sum::<f64>();
    let clipped = adam.m.iter().map(g).sum::<f64>().sqrt() / (1.0 - cfg.beta1);
    assert!(
        (clipped - 1e-6).abs() < 1e-12,
        "first moment carries the clipped gradient: {clipped}"
    );
}

#[test]
fn non_finite_loss_names_the_batch() {
    let loss = HybridLossConfig::default();
    let cfg = TrainConfig::default();
    let mut model = tiny_model(&loss, 3);
    let mut adam = Adam::new(&model.store, &cfg);
    let mut data = examples(2);
    data[1].features.data_mut()[5] = f64::NAN;
    let before = model.store.clone();
    let batch: Vec<&TrainingExample> = data.iter().collect();
    let err = train_step(&mut model, &mut adam, &batch, &loss, &cfg).unwrap_err();
    let Error::NonFinite(msg) = &err else {
        panic!("{err:?}")
    };
    assert!(msg.contains("ex0") && msg.contains("ex1"), "{msg}");
    assert_eq!(model.store, before, "no update after a failed step");
    assert_eq!(adam.step, 0);
}

#[test]
fn missing_speaker_label_in_multi_task_mode() {
    let loss = HybridLossConfig::default();
    let cfg = TrainConfig::default();
    let mut model = tiny_model(&loss, 3);
    let mut adam = Adam::new(&model.store, &cfg);
    let mut data = examples(1);
    data[0].y_speaker = None;
    let err = train_step(&mut model, &mut adam, &[&data[0]], &loss, &cfg).unwrap_err();
    assert_eq!(err, Error::MissingSupervision("speaker"));
    assert_eq!(
        train_step(&mut model, &mut adam, &[], &loss, &cfg).unwrap_err(),
        Error::Empty("batch")
    );
}
