//! Enrollment, query scoring and detection-error trade-off analysis.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Enrollment utterances per keyword.
pub const ENROLLMENT_SIZE: usize = 3;
/// Windows are two-second segments advanced by 100 ms.
pub const WINDOW_SAMPLES: usize = 32_000;
pub const DEFAULT_HOP_SAMPLES: usize = 1_600;
/// Firing negative windows closer than this collapse into one false accept.
pub const DEFAULT_DEDUP_SECONDS: f64 = 2.0;

/// `1 − a·b / (‖a‖‖b‖)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(alloc::format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = libm::sqrt(a.iter().map(|v| v * v).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|v| v * v).sum::<f64>());
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentSet {
    pub keyword_id: usize,
    pub embeddings: Vec<Vec<f64>>,
}

impl EnrollmentSet {
    pub fn new(keyword_id: usize, embeddings: Vec<Vec<f64>>, expected: usize) -> Result<Self> {
        if embeddings.len() != expected {
            return Err(Error::EnrollmentSize {
                expected,
                got: embeddings.len(),
            });
        }
        let d = embeddings[0].len();
        if let Some(e) = embeddings.iter().find(|e| e.len() != d) {
            return Err(Error::Dimension(alloc::format!(
                "enrollment widths {d} and {}",
                e.len()
            )));
        }
        Ok(EnrollmentSet {
            keyword_id,
            embeddings,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

/// Minimum cosine distance from `query` to any enrollment embedding.
pub fn score_query(query: &[f64], enrollment: &EnrollmentSet) -> Result<f64> {
    let mut best = f64::INFINITY;
    for e in &enrollment.embeddings {
        best = best.min(cosine_distance(query, e)?);
    }
    Ok(best)
}

/// Window start offsets, in samples, over a stream of `len` samples.
pub fn window_starts(len: usize, window: usize, hop: usize) -> Vec<usize> {
    if len < window || hop == 0 {
        return Vec::new();
    }
    (0..=(len - window) / hop).map(|i| i * hop).collect()
}

/// One scored window of negative audio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeWindow {
    /// Distinguishes independent (stream, keyword) trials.
    pub trial: usize,
    /// Window start, seconds.
    pub time: f64,
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum FaCounting {
    /// Every firing window is one false accept.
    PerWindow,
    /// Firing windows within `seconds` of an already counted, lower-distance
    /// firing window of the same trial are merged into its event.
    Dedup { seconds: f64 },
}

impl FaCounting {
    pub fn name(&self) -> &'static str {
        match self {
            FaCounting::PerWindow => "per-window",
            FaCounting::Dedup { .. } => "dedup",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub fa_per_hour: f64,
    pub frr: f64,
}

/// Operating points ordered by increasing threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
    pub negative_hours: f64,
    pub counting: FaCounting,
}

/// Distances at which a negative window opens a new false-accept event.
///
/// Windows are visited in increasing distance; a window opens an event unless
/// an earlier event of its trial lies within the merge radius. Because the
/// visiting order is the firing order, the events at any threshold are the
/// first ones of this list.
pub fn event_distances(negatives: &[NegativeWindow], counting: FaCounting) -> Vec<f64> {
    let radius = match counting {
        FaCounting::PerWindow => return sorted(negatives.iter().map(|n| n.distance)),
        FaCounting::Dedup { seconds } => seconds,
    };
    let mut order: Vec<usize> = (0..negatives.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&negatives[a], &negatives[b]);
        x.distance
            .total_cmp(&y.distance)
            .then(x.trial.cmp(&y.trial))
            .then(x.time.total_cmp(&y.time))
    });
    let mut opened: Vec<(usize, f64)> = Vec::new();
    let mut events = Vec::new();
    for i in order {
        let w = &negatives[i];
        if opened
            .iter()
            .all(|&(t, time)| t != w.trial || libm::fabs(time - w.time) >= radius)
        {
            opened.push((w.trial, w.time));
            events.push(w.distance);
        }
    }
    events
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Sweeps every distinct score plus a leading `-inf` point. A trial fires
/// when its distance is at most the threshold.
pub fn det_curve(
    positives: &[f64],
    negatives: &[NegativeWindow],
    negative_hours: f64,
    counting: FaCounting,
) -> Result<DetCurve> {
    if positives.is_empty() {
        return Err(Error::Empty("positive scores"));
    }
    if negatives.is_empty() {
        return Err(Error::Empty("negative scores"));
    }
    if !(negative_hours > 0.0) {
        return Err(Error::Config(alloc::format!(
            "negative_hours {negative_hours} must be > 0"
        )));
    }
    let pos = sorted(positives.iter().copied());
    let events = event_distances(negatives, counting);
    let mut thresholds = sorted(
        pos.iter()
            .copied()
            .chain(negatives.iter().map(|n| n.distance)),
    );
    thresholds.dedup();

    let n_pos = pos.len() as f64;
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        fa_per_hour: 0.0,
        frr: 1.0,
    });
    let (mut ip, mut ie) = (0, 0);
    for t in thresholds {
        while ip < pos.len() && pos[ip] <= t {
            ip += 1;
        }
        while ie < events.len() && events[ie] <= t {
            ie += 1;
        }
        points.push(DetPoint {
            threshold: t,
            fa_per_hour: ie as f64 / negative_hours,
            frr: (pos.len() - ip) as f64 / n_pos,
        });
    }
    Ok(DetCurve {
        points,
        negative_hours,
        counting,
    })
}

/// FRR at `target_fa` false accepts per hour, interpolated linearly in FA/hr
/// between the bracketing operating points. An exact hit takes the lowest
/// FRR among the points at that rate.
pub fn frr_at_fa(curve: &DetCurve, target_fa: f64) -> Result<f64> {
    let fa = |p: &DetPoint| p.fa_per_hour;
    let min = curve.points.iter().map(fa).fold(f64::INFINITY, f64::min);
    let max = curve
        .points
        .iter()
        .map(fa)
        .fold(f64::NEG_INFINITY, f64::max);
    if curve.points.is_empty() || !(target_fa >= min && target_fa <= max) {
        return Err(Error::FaOutOfRange {
            target: target_fa,
            min,
            max,
        });
    }
    let exact = curve
        .points
        .iter()
        .filter(|p| p.fa_per_hour == target_fa)
        .map(|p| p.frr);
    if let Some(best) = exact.reduce(f64::min) {
        return Ok(best);
    }
    let hi = curve
        .points
        .iter()
        .position(|p| p.fa_per_hour > target_fa)
        .expect("target below max");
    let (a, b) = (&curve.points[hi - 1], &curve.points[hi]);
    let w = (target_fa - a.fa_per_hour) / (b.fa_per_hour - a.fa_per_hour);
    Ok(a.frr + w * (b.frr - a.frr))
}

/// Both counting modes' curves and FRR at the target rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetSummary {
    pub curve: DetCurve,
    /// `None` when the curve never reaches the target rate.
    pub frr_at_target: Option<f64>,
}

pub fn summarize(
    positives: &[f64],
    negatives: &[NegativeWindow],
    negative_hours: f64,
    counting: FaCounting,
    target_fa: f64,
) -> Result<DetSummary> {
    let curve = det_curve(positives, negatives, negative_hours, counting)?;
    let frr_at_target = frr_at_fa(&curve, target_fa).ok();
    Ok(DetSummary {
        curve,
        frr_at_target,
    })
}
