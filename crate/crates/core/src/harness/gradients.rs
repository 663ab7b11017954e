//! Finite-difference check of every analytic gradient in the crate.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{BinaryMask, DenseVolume, ScoreGrid, VoxelGridSpec};
use crate::kernels::{
    bilinear_sample, bilinear_sample_grad, deformable_aggregate, deformable_aggregate_grad, grad_check,
    near_cell_boundary, trilinear_sample, trilinear_sample_grad, DeformableSample, DeformableSampleSpec,
    FeatureSource, ImageFeatureMap, OutOfRange, SampleLocation, DEFAULT_FD_STEP,
};
use crate::losses::{
    focal_loss, l1_box_loss, lovasz_softmax_loss, softmax_backward, thing_mask_loss, FocalParams, ProbTable,
};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Inputs closer than this to a kink are resampled.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCaseReport {
    pub name: String,
    pub instances: usize,
    /// Draws rejected for landing near a non-smooth point.
    pub resampled: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub cases: Vec<GradCaseReport>,
    pub passed: bool,
    pub elapsed_ms: f64,
}

/// A draw: `None` when it landed near a kink, else the relative error.
type Draw = fn(&mut ChaCha8Rng) -> Option<f64>;

fn run_case(name: &str, rng: &mut ChaCha8Rng, instances: usize, draw: Draw) -> GradCaseReport {
    let mut report = GradCaseReport {
        name: name.to_string(),
        instances: 0,
        resampled: 0,
        max_rel_error: 0.0,
    };
    while report.instances < instances {
        match draw(rng) {
            Some(e) => {
                report.instances += 1;
                report.max_rel_error = report.max_rel_error.max(e);
            }
            None => report.resampled += 1,
        }
    }
    report
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bilinear_draw(rng: &mut ChaCha8Rng) -> Option<f64> {
    let (h, w, d) = (rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(1..4));
    let map = ImageFeatureMap::new(h, w, d, uniform(rng, h * w * d, -1.0, 1.0)).ok()?;
    let r = uniform(rng, d, -1.0, 1.0);
    let x = [rng.gen_range(-0.5..w as f64 + 0.5), rng.gen_range(-0.5..h as f64 + 0.5)];
    if x.iter().any(|&c| near_cell_boundary(c, KINK_MARGIN)) {
        return None;
    }
    let (_, g) = bilinear_sample_grad(&map, x[0], x[1]);
    let analytic = [dot(&r, &g[0]), dot(&r, &g[1])];
    Some(grad_check(|p| dot(&r, &bilinear_sample(&map, p[0], p[1])), &x, &analytic, DEFAULT_FD_STEP))
}

fn trilinear_draw(rng: &mut ChaCha8Rng) -> Option<f64> {
    let dims = [rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..5)];
    let d = rng.gen_range(1..4);
    let spec = VoxelGridSpec::new(dims, [0.0; 3], [1.0; 3]).ok()?;
    let vol = DenseVolume::new(spec, d, uniform(rng, spec.num_cells() * d, -1.0, 1.0)).ok()?;
    let policy = if rng.gen_bool(0.5) { OutOfRange::Zeros } else { OutOfRange::Clamp };
    let r = uniform(rng, d, -1.0, 1.0);
    let x: Vec<f64> = dims.iter().map(|&n| rng.gen_range(-0.8..n as f64 + 0.8)).collect();
    if x.iter().any(|&c| near_cell_boundary(c, KINK_MARGIN)) {
        return None;
    }
    let (_, g) = trilinear_sample_grad(&vol, [x[0], x[1], x[2]], policy);
    let analytic: Vec<f64> = g.iter().map(|ga| dot(&r, ga)).collect();
    Some(grad_check(|p| dot(&r, &trilinear_sample(&vol, [p[0], p[1], p[2]], policy)), &x, &analytic, DEFAULT_FD_STEP))
}

/// Weights and pixel locations of an image-sourced aggregate, packed as
/// `[w_0, u_0, v_0, w_1, ...]`.
fn deformable_draw(rng: &mut ChaCha8Rng) -> Option<f64> {
    let (h, w, d) = (5, 6, 3);
    let map = ImageFeatureMap::new(h, w, d, uniform(rng, h * w * d, -1.0, 1.0)).ok()?;
    let m = rng.gen_range(1..5);
    let mut x = Vec::with_capacity(3 * m);
    for _ in 0..m {
        x.push(rng.gen_range(-1.0..1.0));
        x.push(rng.gen_range(0.0..w as f64));
        x.push(rng.gen_range(0.0..h as f64));
    }
    if x.chunks(3).any(|s| near_cell_boundary(s[1], KINK_MARGIN) || near_cell_boundary(s[2], KINK_MARGIN)) {
        return None;
    }
    let r = uniform(rng, d, -1.0, 1.0);
    let spec_of = |x: &[f64]| {
        DeformableSampleSpec::new(
            x.chunks(3)
                .map(|s| DeformableSample {
                    location: SampleLocation::Pixel([s[1], s[2]]),
                    weight: s[0],
                })
                .collect(),
        )
        .expect("finite samples")
    };
    let src = FeatureSource::Image(&map);
    let g = deformable_aggregate_grad(d, &spec_of(&x), src).ok()?;
    let mut analytic = Vec::with_capacity(x.len());
    for (dw, dl) in g.d_weights.iter().zip(&g.d_locations) {
        analytic.push(dot(&r, dw));
        analytic.push(dot(&r, &dl[0]));
        analytic.push(dot(&r, &dl[1]));
    }
    let f = |p: &[f64]| dot(&r, &deformable_aggregate(d, &spec_of(p), src).expect("valid source"));
    Some(grad_check(f, &x, &analytic, DEFAULT_FD_STEP))
}

fn random_targets(rng: &mut ChaCha8Rng, items: usize, classes: usize, ignore: bool) -> Vec<usize> {
    let mut t: Vec<usize> = (0..items).map(|_| rng.gen_range(0..classes)).collect();
    if ignore && items > 1 {
        t[0] = classes;
    }
    t
}

fn focal_draw(rng: &mut ChaCha8Rng) -> Option<f64> {
    let (items, classes) = (rng.gen_range(1..8), rng.gen_range(2..6));
    let z = uniform(rng, items * classes, -3.0, 3.0);
    let ignore = rng.gen_bool(0.3);
    let t = random_targets(rng, items, classes, ignore);
    let params = FocalParams {
        alpha: rng.gen_range(0.1..1.0),
        gamma: [0.0, 0.5, 1.0, 2.0, 3.0][rng.gen_range(0..5)],
    };
    let probs = ProbTable::from_logits(classes, &z).ok()?;
    let out = focal_loss(&probs, &t, Some(classes), params).ok()?;
    let f = |x: &[f64]| {
        focal_loss(&ProbTable::from_logits(classes, x).expect("finite"), &t, Some(classes), params)
            .expect("same targets")
            .value
    };
    Some(grad_check(f, &z, &out.grad, DEFAULT_FD_STEP))
}

/// Smallest gap between two sorted error values of any class; the loss has
/// kinks where errors tie.
fn min_error_gap(probs: &ProbTable, targets: &[usize], classes: usize) -> f64 {
    let mut gap = f64::INFINITY;
    for k in 0..classes {
        let mut e: Vec<f64> = targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t < classes)
            .map(|(i, &t)| if t == k { 1.0 - probs.row(i)[k] } else { probs.row(i)[k] })
            .collect();
        e.sort_by(f64::total_cmp);
        for w in e.windows(2) {
            gap = gap.min(w[1] - w[0]);
        }
    }
    gap
}

fn lovasz_draw(rng: &mut ChaCha8Rng) -> Option<f64> {
    let (items, classes) = (rng.gen_range(1..8), rng.gen_range(2..6));
    let z = uniform(rng, items * classes, -3.0, 3.0);
    let ignore = rng.gen_bool(0.3);
    let t = random_targets(rng, items, classes, ignore);
    let probs = ProbTable::from_logits(classes, &z).ok()?;
    if min_error_gap(&probs, &t, classes) < KINK_MARGIN {
        return None;
    }
    let out = lovasz_softmax_loss(&probs, &t, Some(classes), None).ok()?;
    let analytic = softmax_backward(&probs, &out.grad);
    let f = |x: &[f64]| {
        lovasz_softmax_loss(&ProbTable::from_logits(classes, x).expect("finite"), &t, Some(classes), None)
            .expect("same targets")
            .value
    };
    Some(grad_check(f, &z, &analytic, DEFAULT_FD_STEP))
}

fn thing_mask_draw(rng: &mut ChaCha8Rng) -> Option<f64> {
    let dims = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3)];
    let spec = VoxelGridSpec::new(dims, [0.0; 3], [1.0; 3]).ok()?;
    let x = uniform(rng, spec.num_cells(), 0.02, 0.98);
    let mask = BinaryMask::new(spec, (0..spec.num_cells()).map(|_| rng.gen_bool(0.4)).collect()).ok()?;
    let params = FocalParams::default();
    let out = thing_mask_loss(&ScoreGrid::new(spec, x.clone()).ok()?, &mask, params).ok()?;
    let f = |s: &[f64]| {
        thing_mask_loss(&ScoreGrid::new(spec, s.to_vec()).expect("same spec"), &mask, params)
            .expect("scores in range")
            .value
    };
    Some(grad_check(f, &x, &out.grad, DEFAULT_FD_STEP))
}

fn l1_draw(rng: &mut ChaCha8Rng) -> Option<f64> {
    let n = rng.gen_range(1..10);
    let pred = uniform(rng, n, -5.0, 5.0);
    let target = uniform(rng, n, -5.0, 5.0);
    if pred.iter().zip(&target).any(|(p, t)| (p - t).abs() < KINK_MARGIN) {
        return None;
    }
    let out = l1_box_loss(&pred, &target).ok()?;
    let f = |p: &[f64]| l1_box_loss(p, &target).expect("same length").value;
    Some(grad_check(f, &pred, &out.grad, DEFAULT_FD_STEP))
}

/// Checks each gradient on `instances` random smooth inputs.
pub fn run_gradient_suite(seed: u64, instances: usize) -> GradSuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: [(&str, Draw); 7] = [
        ("bilinear", bilinear_draw),
        ("trilinear", trilinear_draw),
        ("deformable", deformable_draw),
        ("focal", focal_draw),
        ("lovasz", lovasz_draw),
        ("thing_mask", thing_mask_draw),
        ("l1", l1_draw),
    ];
    let cases: Vec<GradCaseReport> = cases
        .iter()
        .map(|&(name, f)| run_case(name, &mut rng, instances, f))
        .collect();
    GradSuiteReport {
        seed,
        step: DEFAULT_FD_STEP,
        tolerance: GRADIENT_TOLERANCE,
        passed: cases.iter().all(|c| c.max_rel_error < GRADIENT_TOLERANCE),
        cases,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let r = run_gradient_suite(0, 50);
        for c in &r.cases {
            assert_eq!(c.instances, 50);
            assert!(c.max_rel_error < GRADIENT_TOLERANCE, "{}: {}", c.name, c.max_rel_error);
        }
        assert!(r.passed);
    }
}
