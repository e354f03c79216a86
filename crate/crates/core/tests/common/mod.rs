#![allow(dead_code)]

use qbye_core::gradcheck::{self, GradCheck, GradCheckOptions};
use qbye_core::params::{Group, Kind, ParamId, ParamStore};
use qbye_core::tape::{Tape, Var};
use qbye_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const TRIALS: u64 = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
}

/// A store holding one trainable tensor per shape, uniform in `[-1, 1)`.
pub fn inputs(seed: u64, shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            store.push(
                format!("x{i}"),
                Group::Encoder,
                Kind::Trainable,
                random(&mut r, a, b, 1.0),
            )
        })
        .collect();
    (store, ids)
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element gets a distinct sensitivity.
pub fn weighted_sum<'a>(tape: &mut Tape<'a>, y: Var, seed: u64) -> Var {
    let (r, c) = tape.value(y).shape();
    let w = tape.constant(random(&mut rng(seed ^ 0x5eed), r, c, 1.0));
    let p = tape.mul(y, w);
    tape.sum_all(p)
}

pub fn check<F>(store: &ParamStore, seed: u64, f: F) -> GradCheck
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Var,
{
    gradcheck::check(
        store,
        GradCheckOptions {
            seed,
            ..Default::default()
        },
        f,
    )
}

pub fn assert_grad<F>(what: &str, store: &ParamStore, seed: u64, f: F)
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Var,
{
    let r = check(store, seed, f);
    assert!(r.checked_elements > 0, "{what}: nothing checked");
    assert!(
        r.max_rel_error < GRAD_TOL,
        "{what} (seed {seed}): relative error {:.3e}",
        r.max_rel_error
    );
}
