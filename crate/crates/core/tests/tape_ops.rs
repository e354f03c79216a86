mod common;

use common::{assert_grad, inputs, weighted_sum, TRIALS};
use qbye_core::params::ParamId;
use qbye_core::tape::Tape;
use qbye_core::Tensor;

type Build = for<'a> fn(&mut Tape<'a>, &[qbye_core::tape::Var]) -> qbye_core::tape::Var;

fn op_check(name: &str, shapes: &[(usize, usize)], build: Build) {
    for seed in 0..TRIALS {
        let (store, ids) = inputs(seed, shapes);
        let ids: Vec<ParamId> = ids;
        assert_grad(name, &store, seed, |tape, s| {
            let vars: Vec<_> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let y = build(tape, &vars);
            weighted_sum(tape, y, seed)
        });
    }
}

#[test]
fn binary_and_broadcast_ops() {
    op_check("matmul", &[(3, 4), (4, 5)], |t, v| t.matmul(v[0], v[1]));
    op_check("matmul_nt", &[(3, 4), (5, 4)], |t, v| {
        t.matmul_nt(v[0], v[1])
    });
    op_check("add", &[(3, 4), (3, 4)], |t, v| t.add(v[0], v[1]));
    op_check("sub", &[(3, 4), (3, 4)], |t, v| t.sub(v[0], v[1]));
    op_check("mul", &[(3, 4), (3, 4)], |t, v| t.mul(v[0], v[1]));
    op_check("add_row", &[(3, 4), (1, 4)], |t, v| t.add_row(v[0], v[1]));
    op_check("mul_row", &[(3, 4), (1, 4)], |t, v| t.mul_row(v[0], v[1]));
    op_check("mul_col", &[(3, 4), (3, 1)], |t, v| t.mul_col(v[0], v[1]));
    op_check("outer_rows", &[(3, 4), (2, 4)], |t, v| {
        t.outer_rows(v[0], v[1])
    });
    op_check("scale", &[(3, 4)], |t, v| t.scale(v[0], -1.7));
}

#[test]
fn pointwise_ops() {
    op_check("relu", &[(4, 5)], |t, v| t.relu(v[0]));
    op_check("sigmoid", &[(4, 5)], |t, v| t.sigmoid(v[0]));
    op_check("tanh", &[(4, 5)], |t, v| t.tanh(v[0]));
    op_check("silu", &[(4, 5)], |t, v| t.silu(v[0]));
    op_check("glu", &[(4, 6)], |t, v| t.glu(v[0]));
    op_check("sqrt_clamp", &[(4, 5)], |t, v| {
        let sq = t.mul(v[0], v[0]);
        t.sqrt_clamp(sq, 1e-10)
    });
}

#[test]
fn normalisations() {
    op_check("softmax_rows", &[(4, 5)], |t, v| t.softmax_rows(v[0]));
    op_check("softmax_cols", &[(4, 5)], |t, v| t.softmax_cols(v[0]));
    op_check("layer_norm", &[(4, 5), (1, 5), (1, 5)], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    op_check("batch_norm", &[(6, 3), (1, 3), (1, 3)], |t, v| {
        t.batch_norm(v[0], v[1], v[2], 1e-5, (ParamId(0), ParamId(0)), None)
    });
    op_check("l2_normalize_rows", &[(4, 5)], |t, v| {
        t.l2_normalize_rows(v[0]).unwrap()
    });
    op_check("l2_normalize_cols", &[(4, 5)], |t, v| {
        t.l2_normalize_cols(v[0]).unwrap()
    });
}

#[test]
fn running_batch_norm_treats_buffers_as_constants() {
    let mean = Tensor::from_vec(1, 3, vec![0.1, -0.2, 0.3]);
    let var = Tensor::from_vec(1, 3, vec![1.5, 0.5, 2.0]);
    for seed in 0..TRIALS {
        let (store, ids) = inputs(seed, &[(6, 3), (1, 3), (1, 3)]);
        assert_grad("batch_norm eval", &store, seed, |tape, s| {
            let v: Vec<_> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let y = tape.batch_norm(
                v[0],
                v[1],
                v[2],
                1e-5,
                (ParamId(0), ParamId(0)),
                Some((&mean, &var)),
            );
            weighted_sum(tape, y, seed)
        });
    }
}

#[test]
fn structural_ops() {
    op_check("im2col", &[(9, 3)], |t, v| t.im2col(v[0], 3, 2, 2));
    op_check("im2col k5", &[(7, 2)], |t, v| t.im2col(v[0], 5, 1, 1));
    op_check("depthwise_conv", &[(8, 3), (5, 3)], |t, v| {
        t.depthwise_conv(v[0], v[1])
    });
    op_check("slice_cols", &[(4, 6)], |t, v| t.slice_cols(v[0], 2, 3));
    op_check("concat_cols", &[(4, 2), (4, 3)], |t, v| {
        t.concat_cols(&[v[0], v[1], v[0]])
    });
    op_check("gather_rows", &[(5, 3)], |t, v| {
        t.gather_rows(v[0], &[4, 0, 2, 2])
    });
    op_check("transpose", &[(4, 3)], |t, v| t.transpose(v[0]));
    op_check("mean_rows", &[(4, 3)], |t, v| t.mean_rows(v[0]));
    op_check("avg_pool_rows", &[(10, 3)], |t, v| t.avg_pool_rows(v[0], 4));
    op_check("broadcast_rows", &[(1, 3)], |t, v| {
        t.broadcast_rows(v[0], 4)
    });
    op_check("reshape", &[(2, 6)], |t, v| t.reshape(v[0], 4, 3));
    op_check("rel_bias", &[(5, 5), (1, 7)], |t, v| {
        t.rel_bias(v[0], v[1], 3)
    });
}

#[test]
fn loss_building_blocks() {
    let labels = [Some(2), None, Some(0), Some(3)];
    for seed in 0..common::TRIALS {
        let (store, ids) = inputs(seed, &[(4, 5)]);
        assert_grad("aam_logits + ce", &store, seed, |t, s| {
            let x = t.param(s, ids[0]);
            let c = t.tanh(x);
            let l = t.aam_logits(c, &labels, 0.2, 4.0);
            t.cross_entropy(l, &labels).unwrap()
        });
        assert_grad("group_softmax_sum", &store, seed, |t, s| {
            let x = t.param(s, ids[0]);
            let x = t.slice_cols(x, 0, 4);
            let y = t.group_softmax_sum(x, 2, 0.3);
            weighted_sum(t, y, seed)
        });
        assert_grad("scale_shift_target", &store, seed, |t, s| {
            let x = t.param(s, ids[0]);
            let y = t.scale_shift_target(x, &labels, 3.0, 0.1);
            weighted_sum(t, y, seed)
        });
    }
}

#[test]
fn cross_entropy_rejects_unsupervised_and_out_of_range() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(2, 3));
    assert_eq!(
        tape.cross_entropy(x, &[None, None]).unwrap_err(),
        qbye_core::Error::NoSupervisedFrames
    );
    assert!(matches!(
        tape.cross_entropy(x, &[Some(3), None]).unwrap_err(),
        qbye_core::Error::LabelOutOfRange {
            label: 3,
            classes: 3
        }
    ));
}

#[test]
fn gradient_reversal_negates_and_composes() {
    let (store, ids) = inputs(7, &[(1, 2)]);
    let run = |reversals: usize| {
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let mut y = x;
        for _ in 0..reversals {
            y = tape.gradient_reversal(y, 1.0);
        }
        assert_eq!(tape.value(y), store.get(ids[0]));
        let l = weighted_sum(&mut tape, y, 3);
        tape.backward(l).param(ids[0]).unwrap().clone()
    };
    let plain = run(0);
    assert_eq!(run(1), plain.map(|v| -v));
    assert_eq!(run(2), plain);
}
