mod common;

use common::{assert_grad, random, rng, weighted_sum, TRIALS};
use qbye_core::encoders::{
    ConformerConfig, ConformerStage, EcapaConfig, Encoder, EncoderConfig, EncoderFamily,
    LicoBlockSpec, LiconetConfig,
};
use qbye_core::nn::{Ctx, Mode, Probe};
use qbye_core::params::{Group, Kind, ParamBuilder, ParamId, ParamStore};
use qbye_core::tape::Tape;
use qbye_core::{Error, Tensor};

fn build(cfg: &EncoderConfig, seed: u64) -> (Encoder, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let enc = Encoder::new(
        cfg,
        &mut ParamBuilder::new(&mut store, &mut r, Group::Encoder),
    )
    .unwrap();
    (enc, store)
}

fn run(enc: &Encoder, store: &ParamStore, x: &Tensor, mode: Mode) -> Tensor {
    let mut tape = Tape::new();
    let ctx = Ctx::new(store, mode);
    let v = tape.constant(x.clone());
    let y = enc.forward(&mut tape, &ctx, v);
    tape.value(y).clone()
}

fn small(family: EncoderFamily) -> EncoderConfig {
    match family {
        EncoderFamily::Liconet => EncoderConfig::Liconet(LiconetConfig {
            input_dim: 6,
            stem_channels: 4,
            kernel_size: 3,
            expansion_factor: 2,
            blocks: vec![
                LicoBlockSpec {
                    channels: 4,
                    stride: 1,
                    residual: true,
                },
                LicoBlockSpec {
                    channels: 5,
                    stride: 2,
                    residual: false,
                },
                LicoBlockSpec {
                    channels: 5,
                    stride: 1,
                    residual: true,
                },
            ],
        }),
        EncoderFamily::Conformer => EncoderConfig::Conformer(ConformerConfig {
            input_dim: 6,
            depth: 2,
            attention_dim: 4,
            num_heads: 2,
            ffn_hidden: 6,
            kernel_size: 3,
            max_relative_position: 4,
        }),
        EncoderFamily::EcapaTdnn => EncoderConfig::EcapaTdnn(EcapaConfig {
            input_dim: 6,
            channels: 8,
            stem_kernel: 3,
            stem_stride: 1,
            res2_scale: 4,
            res2_kernel: 3,
            dilations: vec![1, 2],
            se_bottleneck: 3,
            mfa_channels: 6,
        }),
    }
}

const FAMILIES: [EncoderFamily; 3] = [
    EncoderFamily::Liconet,
    EncoderFamily::Conformer,
    EncoderFamily::EcapaTdnn,
];

/// Adds the encoder input to the store so its gradient is checked alongside the weights.
fn with_input(store: &mut ParamStore, seed: u64, frames: usize, dim: usize) -> ParamId {
    store.push(
        "input".into(),
        Group::Encoder,
        Kind::Trainable,
        random(&mut rng(seed + 100), frames, dim, 1.0),
    )
}

#[test]
fn reference_shapes() {
    let x = random(&mut rng(1), 198, 40, 1.0);
    for (family, frames, dim) in [
        (EncoderFamily::Liconet, 25, 43),
        (EncoderFamily::Conformer, 198, 128),
        (EncoderFamily::EcapaTdnn, 50, 384),
    ] {
        let (enc, store) = build(&EncoderConfig::reference(family), 0);
        assert_eq!(enc.out_frames(198), frames, "{}", family.name());
        assert_eq!(enc.out_dim(), dim, "{}", family.name());
        let y = run(&enc, &store, &x, Mode::Eval);
        assert_eq!(y.shape(), (frames, dim), "{}", family.name());
        assert!(y.is_finite());
    }
}

#[test]
fn determinism_and_finiteness() {
    for family in FAMILIES {
        let (enc, store) = build(&small(family), 3);
        let x = random(&mut rng(4), 12, 6, 5.0);
        for mode in [Mode::Train, Mode::Eval] {
            let a = run(&enc, &store, &x, mode);
            let b = run(&enc, &store, &x, mode);
            assert_eq!(a.data(), b.data(), "{}", family.name());
            assert!(a.is_finite());
        }
        let (enc2, store2) = build(&small(family), 3);
        assert_eq!(
            run(&enc2, &store2, &x, Mode::Eval),
            run(&enc, &store, &x, Mode::Eval)
        );
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    for family in FAMILIES {
        for seed in 0..TRIALS {
            let (enc, mut store) = build(&small(family), seed);
            let xid = with_input(&mut store, seed, 10, 6);
            assert_grad(family.name(), &store, seed, |tape, s| {
                let ctx = Ctx::new(s, Mode::Train);
                let x = tape.param(s, xid);
                let y = enc.forward(tape, &ctx, x);
                weighted_sum(tape, y, seed)
            });
        }
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    for seed in 0..TRIALS {
        let (Encoder::Liconet(lico), mut store) = build(&small(EncoderFamily::Liconet), seed)
        else {
            unreachable!()
        };
        let xid = with_input(&mut store, seed, 10, 4);
        assert_grad("lico block", &store, seed, |tape, s| {
            let ctx = Ctx::new(s, Mode::Train);
            let x = tape.param(s, xid);
            let y = lico.blocks[0].forward(tape, &ctx, x);
            weighted_sum(tape, y, seed)
        });

        let (Encoder::Conformer(conf), mut store) = build(&small(EncoderFamily::Conformer), seed)
        else {
            unreachable!()
        };
        let xid = with_input(&mut store, seed, 10, 4);
        let b = &conf.blocks[0];
        assert_grad("conformer block", &store, seed, |tape, s| {
            let ctx = Ctx::new(s, Mode::Train);
            let x = tape.param(s, xid);
            let y = b.forward(tape, &ctx, x);
            weighted_sum(tape, y, seed)
        });
        assert_grad("self attention", &store, seed, |tape, s| {
            let ctx = Ctx::new(s, Mode::Train);
            let x = tape.param(s, xid);
            let y = b.attention.forward(tape, &ctx, x);
            weighted_sum(tape, y, seed)
        });
        // Zero-initialised tables would leave the relative bias untested.
        let mut biased = store.clone();
        for &id in &b.attention.rel_bias {
            let n = biased.get(id).len();
            *biased.get_mut(id) = random(&mut rng(seed + 7), 1, n, 0.5);
        }
        assert_grad("relative bias", &biased, seed, |tape, s| {
            let ctx = Ctx::new(s, Mode::Train);
            let x = tape.param(s, xid);
            let y = b.attention.forward(tape, &ctx, x);
            weighted_sum(tape, y, seed)
        });
        assert_grad("conv module", &store, seed, |tape, s| {
            let ctx = Ctx::new(s, Mode::Train);
            let x = tape.param(s, xid);
            let y = b.conv.forward(tape, &ctx, x);
            weighted_sum(tape, y, seed)
        });

        let (Encoder::EcapaTdnn(ecapa), mut store) = build(&small(EncoderFamily::EcapaTdnn), seed)
        else {
            unreachable!()
        };
        let xid = with_input(&mut store, seed, 10, 8);
        assert_grad("se-res2 block", &store, seed, |tape, s| {
            let ctx = Ctx::new(s, Mode::Train);
            let x = tape.param(s, xid);
            let y = ecapa.blocks[1].forward(tape, &ctx, x);
            weighted_sum(tape, y, seed)
        });
    }
}

#[test]
fn liconet_with_silent_blocks_is_the_stem_projection() {
    let cfg = LiconetConfig::uniform(8, &[1, 1, 1]);
    let (enc, mut store) = build(&EncoderConfig::Liconet(cfg), 2);
    let Encoder::Liconet(lico) = &enc else {
        unreachable!()
    };
    for b in &lico.blocks {
        let id = b.temporal.weight;
        let n = store.get(id).shape();
        *store.get_mut(id) = Tensor::zeros(n.0, n.1);
        *store.get_mut(b.pointwise.weight) = Tensor::identity(b.pointwise.cin);
        for bias in [b.temporal.bias, b.pointwise.bias, b.project.bias]
            .into_iter()
            .flatten()
        {
            let s = store.get(bias).shape();
            *store.get_mut(bias) = Tensor::zeros(s.0, s.1);
        }
    }
    let x = random(&mut rng(5), 20, 40, 1.0);
    let y = run(&enc, &store, &x, Mode::Train);
    let w = store.get(lico.stem.weight);
    let mut expected = x.matmul(w);
    let b = store.get(lico.stem.bias.unwrap());
    for r in 0..expected.rows() {
        for (v, bv) in expected.row_mut(r).iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    assert!(y.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn liconet_rejects_mismatched_residual() {
    let mut cfg = LiconetConfig::uniform(8, &[1, 1]);
    cfg.blocks[1] = LicoBlockSpec {
        channels: 6,
        stride: 1,
        residual: true,
    };
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let err = Encoder::new(
        &EncoderConfig::Liconet(cfg),
        &mut ParamBuilder::new(&mut store, &mut r, Group::Encoder),
    );
    assert!(matches!(err, Err(Error::Config(m)) if m.contains("residual")));
}

#[test]
fn conformer_block_order_and_half_step_residuals() {
    let (Encoder::Conformer(conf), store) = build(&small(EncoderFamily::Conformer), 9) else {
        unreachable!()
    };
    let b = &conf.blocks[0];
    let x = random(&mut rng(6), 7, 4, 1.0);
    let mut tape = Tape::new();
    let ctx = Ctx::new(&store, Mode::Eval);
    let xv = tape.constant(x);
    let mut stages = Vec::new();
    let y = b.forward_traced(&mut tape, &ctx, xv, &mut |s, _| stages.push(s));
    assert_eq!(
        stages,
        [
            ConformerStage::FeedForwardIn,
            ConformerStage::SelfAttention,
            ConformerStage::Convolution,
            ConformerStage::FeedForwardOut
        ]
    );

    let f = b.ff_in.forward(&mut tape, &ctx, xv);
    let f = tape.scale(f, 0.5);
    let h1 = tape.add(xv, f);
    let a = b.attention.forward(&mut tape, &ctx, h1);
    let h2 = tape.add(h1, a);
    let c = b.conv.forward(&mut tape, &ctx, h2);
    let h3 = tape.add(h2, c);
    let f = b.ff_out.forward(&mut tape, &ctx, h3);
    let f = tape.scale(f, 0.5);
    let h4 = tape.add(h3, f);
    let manual = b.final_norm.forward(&mut tape, &ctx, h4);
    assert_eq!(tape.value(y), tape.value(manual));
}

#[test]
fn conformer_single_frame() {
    let (enc, store) = build(&EncoderConfig::reference(EncoderFamily::Conformer), 0);
    let y = run(&enc, &store, &random(&mut rng(8), 1, 40, 1.0), Mode::Eval);
    assert_eq!(y.shape(), (1, 128));
    assert!(y.is_finite());
}

#[test]
fn conformer_single_frame_attention_is_the_value_projection() {
    let (Encoder::Conformer(conf), store) = build(&small(EncoderFamily::Conformer), 2) else {
        unreachable!()
    };
    let att = &conf.blocks[0].attention;
    let x = random(&mut rng(3), 1, 4, 1.0);
    let mut tape = Tape::new();
    let ctx = Ctx::new(&store, Mode::Eval);
    let xv = tape.constant(x);
    let y = att.forward(&mut tape, &ctx, xv);
    let n = att.norm.forward(&mut tape, &ctx, xv);
    let v = att.value.forward(&mut tape, &ctx, n);
    let expected = att.out.forward(&mut tape, &ctx, v);
    assert!(tape.value(y).max_abs_diff(tape.value(expected)) < 1e-12);
}

#[test]
fn conformer_rejects_indivisible_heads() {
    let mut cfg = ConformerConfig::reference();
    cfg.num_heads = 3;
    let err = cfg.validate().unwrap_err();
    assert_eq!(
        err,
        Error::Config("attention_dim 128 not divisible by num_heads 3".into())
    );
}

#[test]
fn ecapa_rejects_indivisible_scale() {
    let mut cfg = EcapaConfig::reference();
    cfg.channels = 100;
    assert!(
        matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("not divisible by res2_scale"))
    );
}

#[test]
fn ecapa_unit_gate_reduces_to_res2_block() {
    let (Encoder::EcapaTdnn(ecapa), store) = build(&small(EncoderFamily::EcapaTdnn), 4) else {
        unreachable!()
    };
    let block = &ecapa.blocks[0];
    let x = random(&mut rng(2), 9, 8, 1.0);
    let mut tape = Tape::new();
    let ctx = Ctx::new(&store, Mode::Eval).with_probe(Probe {
        se_gate_ones: true,
        ..Probe::default()
    });
    let xv = tape.constant(x);
    let gated = block.forward(&mut tape, &ctx, xv);
    let plain = block.res2_forward(&mut tape, &ctx, xv);
    let plain = tape.add(xv, plain);
    assert_eq!(tape.value(gated), tape.value(plain));
}

#[test]
fn scaled_configs_stay_valid() {
    for family in FAMILIES {
        for scale in [0.1, 0.25, 0.5, 1.0, 2.0] {
            let cfg = EncoderConfig::reference(family).scaled(scale);
            cfg.validate().unwrap();
            let (enc, store) = build(&cfg, 0);
            assert!(run(&enc, &store, &random(&mut rng(0), 30, 40, 1.0), Mode::Eval).is_finite());
        }
    }
}
