//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Kind, ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Worst over checked tensors of `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub max_rel_error: f64,
    pub checked_elements: usize,
    /// Tensors where both gradients are below the noise floor, e.g. a bias
    /// feeding a normalisation.
    pub zero_tensors: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Elements sampled per tensor; all when the tensor is smaller.
    pub per_tensor: usize,
    /// Absolute noise floor of the central difference; tensors whose
    /// analytic and numeric norms are both below it agree on zero.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            per_tensor: 24,
            floor: 1e-7,
            seed: 0,
        }
    }
}

/// One parameter element.
pub type Point = (ParamId, usize);

pub fn trainable_ids(store: &ParamStore) -> Vec<ParamId> {
    store
        .ids()
        .filter(|&id| store.entry(id).kind == Kind::Trainable)
        .collect()
}

/// Up to `per_tensor` seeded element indices of each tensor, grouped by tensor.
pub fn sample_points(store: &ParamStore, ids: &[ParamId], opts: &GradCheckOptions) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut points = Vec::new();
    for &id in ids {
        let n = store.get(id).len();
        if n <= opts.per_tensor {
            points.extend((0..n).map(|i| (id, i)));
        } else {
            let mut picks = sample(&mut rng, n, opts.per_tensor).into_vec();
            picks.sort_unstable();
            points.extend(picks.into_iter().map(|i| (id, i)));
        }
    }
    points
}

pub fn evaluate<F>(store: &ParamStore, f: &F) -> f64
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    tape.value(loss).data()[0]
}

/// Tape gradient of `f` at `points`.
pub fn analytic_at<F>(store: &ParamStore, points: &[Point], f: &F) -> Vec<f64>
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss);
    points
        .iter()
        .map(|&(id, i)| grads.param(id).map_or(0.0, |g| g.data()[i]))
        .collect()
}

/// Central difference of `f` at `points`.
pub fn numeric_at<F>(store: &ParamStore, points: &[Point], step: f64, f: &F) -> Vec<f64>
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Var,
{
    let mut work = store.clone();
    points
        .iter()
        .map(|&(id, i)| {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = evaluate(&work, f);
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = evaluate(&work, f);
            work.get_mut(id).data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Per-tensor relative error between two gradient samples over the same points.
pub fn compare(points: &[Point], analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheck {
    let mut worst: f64 = 0.0;
    let mut zero_tensors = 0;
    let mut start = 0;
    while start < points.len() {
        let id = points[start].0;
        let end = start + points[start..].iter().take_while(|p| p.0 == id).count();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for k in start..end {
            let (a, n) = (analytic[k], numeric[k]);
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
        let (diff, na, nn) = (libm::sqrt(diff), libm::sqrt(na), libm::sqrt(nn));
        if na.max(nn) < floor {
            zero_tensors += 1;
        } else {
            worst = worst.max(diff / na.max(nn));
        }
        start = end;
    }
    GradCheck {
        max_rel_error: worst,
        checked_elements: points.len(),
        zero_tensors,
    }
}

/// Compares the tape gradient of `f` with central differences for every
/// trainable entry of `store`.
pub fn check<F>(store: &ParamStore, opts: GradCheckOptions, f: F) -> GradCheck
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Var,
{
    check_ids(store, &trainable_ids(store), opts, f)
}

pub fn check_ids<F>(store: &ParamStore, ids: &[ParamId], opts: GradCheckOptions, f: F) -> GradCheck
where
    F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Var,
{
    let points = sample_points(store, ids, &opts);
    let analytic = analytic_at(store, &points, &f);
    let numeric = numeric_at(store, &points, opts.step, &f);
    compare(&points, &analytic, &numeric, opts.floor)
}
