//! Segmentation and detection losses with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{BinaryMask, ScoreGrid};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Probabilities are floored at this value inside logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major `items x classes` table of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    classes: usize,
    data: Vec<f64>,
}

impl ProbTable {
    /// Rows must be non-negative and sum to 1 within 1e-6.
    pub fn new(classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || !data.len().is_multiple_of(classes) {
            return Err(invalid("probs", format!("{} values for {classes} classes", data.len())));
        }
        for (n, row) in data.chunks(classes).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(invalid("probs", format!("row {n} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(invalid("probs", format!("row {n} sums to {s}")));
            }
        }
        Ok(Self { classes, data })
    }

    pub fn from_logits(classes: usize, logits: &[f64]) -> Result<Self> {
        if classes == 0 || !logits.len().is_multiple_of(classes) {
            return Err(invalid("logits", format!("{} values for {classes} classes", logits.len())));
        }
        if let Some(n) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(n));
        }
        Ok(Self {
            classes,
            data: softmax(classes, logits),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn items(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.classes..(n + 1) * self.classes]
    }
}

/// Row-wise softmax of an `items x classes` table.
pub fn softmax(classes: usize, logits: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|z| (z - m).exp()));
        let s: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|e| *e /= s);
    }
    out
}

/// Pulls a gradient wrt softmax outputs back to the logits:
/// `dz_j = p_j (g_j - sum_k g_k p_k)` per row.
pub fn softmax_backward(probs: &ProbTable, grad_probs: &[f64]) -> Vec<f64> {
    let c = probs.classes;
    let mut out = vec![0.0; grad_probs.len()];
    for ((o, p), g) in out.chunks_mut(c).zip(probs.data.chunks(c)).zip(grad_probs.chunks(c)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..c {
            o[j] = p[j] * (g[j] - dot);
        }
    }
    out
}

/// Sum in a fixed pairwise order, independent of thread count.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 32 {
        x.iter().sum()
    } else {
        let mid = x.len() / 2;
        pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
    }
}

/// Scalar loss and its gradient (same shape as the differentiated input).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: FOCAL_ALPHA,
            gamma: FOCAL_GAMMA,
        }
    }
}

impl FocalParams {
    fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(invalid("alpha", format!("{} is not a finite non-negative value", self.alpha)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(invalid("gamma", format!("{} is not a finite non-negative value", self.gamma)));
        }
        Ok(())
    }

    /// `-w (1-p)^γ ln p` and its derivative in `p`.
    fn term(&self, weight: f64, p: f64) -> (f64, f64) {
        let p = p.clamp(PROB_FLOOR, 1.0);
        let q = 1.0 - p;
        let lp = p.ln();
        let qg = q.powf(self.gamma);
        let dq = if self.gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            self.gamma * q.powf(self.gamma - 1.0)
        };
        (-weight * qg * lp, weight * (dq * lp - qg / p))
    }
}

/// Items whose target is `ignore` are skipped; every other target must be a
/// valid class column.
fn eligible_items(
    probs: &ProbTable,
    targets: &[usize],
    ignore: Option<usize>,
    mask: Option<&[bool]>,
) -> Result<Vec<usize>> {
    if targets.len() != probs.items() {
        return Err(Error::LengthMismatch {
            expected: probs.items(),
            actual: targets.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != targets.len() {
            return Err(Error::LengthMismatch {
                expected: targets.len(),
                actual: m.len(),
            });
        }
    }
    let mut items = Vec::new();
    for (n, &t) in targets.iter().enumerate() {
        if Some(t) == ignore || mask.is_some_and(|m| !m[n]) {
            continue;
        }
        if t >= probs.classes {
            return Err(invalid("targets", format!("item {n} has target {t} >= {}", probs.classes)));
        }
        items.push(n);
    }
    if items.is_empty() {
        return Err(Error::Empty("no eligible items"));
    }
    Ok(items)
}

/// Multi-class focal loss `mean(-α (1-p_t)^γ ln p_t)` over non-ignored items;
/// the gradient is wrt the logits that produced `probs`.
pub fn focal_loss(
    probs: &ProbTable,
    targets: &[usize],
    ignore: Option<usize>,
    params: FocalParams,
) -> Result<LossOutput> {
    params.validate()?;
    let items = eligible_items(probs, targets, ignore, None)?;
    let n = items.len() as f64;
    let c = probs.classes;
    let mut terms = Vec::with_capacity(items.len());
    let mut grad_p = vec![0.0; probs.data.len()];
    for &i in &items {
        let t = targets[i];
        let (v, d) = params.term(params.alpha, probs.row(i)[t]);
        terms.push(v);
        grad_p[i * c + t] = d / n;
    }
    Ok(LossOutput {
        value: pairwise_sum(&terms) / n,
        grad: softmax_backward(probs, &grad_p),
    })
}

/// Lovász-softmax loss over the items flagged in `eligible` (and not
/// ignored), averaged over classes present in their targets. The gradient is
/// wrt `probs`. Sort ties are broken by item index.
pub fn lovasz_softmax_loss(
    probs: &ProbTable,
    targets: &[usize],
    ignore: Option<usize>,
    eligible: Option<&[bool]>,
) -> Result<LossOutput> {
    let items = eligible_items(probs, targets, ignore, eligible)?;
    let c = probs.classes;
    let mut present: Vec<usize> = items.iter().map(|&i| targets[i]).collect();
    present.sort_unstable();
    present.dedup();
    let np = present.len() as f64;

    let mut grad = vec![0.0; probs.data.len()];
    let mut per_class = Vec::with_capacity(present.len());
    for &k in &present {
        // (error, item, is foreground)
        let mut errs: Vec<(f64, usize, bool)> = items
            .iter()
            .map(|&i| {
                let fg = targets[i] == k;
                let p = probs.row(i)[k];
                (if fg { 1.0 - p } else { p }, i, fg)
            })
            .collect();
        errs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let gts = errs.iter().filter(|e| e.2).count() as f64;
        let (mut fg_seen, mut bg_seen) = (0.0, 0.0);
        let mut prev_jac = 0.0;
        let mut terms = Vec::with_capacity(errs.len());
        for &(e, i, fg) in &errs {
            if fg {
                fg_seen += 1.0;
            } else {
                bg_seen += 1.0;
            }
            let jac = 1.0 - (gts - fg_seen) / (gts + bg_seen);
            let g = jac - prev_jac;
            prev_jac = jac;
            terms.push(e * g);
            grad[i * c + k] = if fg { -g } else { g } / np;
        }
        per_class.push(pairwise_sum(&terms));
    }
    Ok(LossOutput {
        value: pairwise_sum(&per_class) / np,
        grad,
    })
}

/// Binary focal loss over all voxels: `α` weights positives, `1-α`
/// negatives. Scores are probabilities in `[0, 1]`; the gradient is wrt them.
pub fn thing_mask_loss(scores: &ScoreGrid, target: &BinaryMask, params: FocalParams) -> Result<LossOutput> {
    params.validate()?;
    scores.spec().check_same(target.spec(), "scores and thing mask")?;
    if let Some(n) = scores.values().iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(invalid("scores", format!("voxel {n} score outside [0, 1]")));
    }
    let n = scores.values().len() as f64;
    let mut terms = Vec::with_capacity(scores.values().len());
    let mut grad = Vec::with_capacity(scores.values().len());
    for (&s, &t) in scores.values().iter().zip(target.bits()) {
        if t {
            let (v, d) = params.term(params.alpha, s);
            terms.push(v);
            grad.push(d / n);
        } else {
            let (v, d) = params.term(1.0 - params.alpha, 1.0 - s);
            terms.push(v);
            grad.push(-d / n);
        }
    }
    Ok(LossOutput {
        value: pairwise_sum(&terms) / n,
        grad,
    })
}

/// Mean absolute error over all box parameters; subgradient 0 at equality.
pub fn l1_box_loss(pred: &[f64], target: &[f64]) -> Result<LossOutput> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("box parameters"));
    }
    let n = pred.len() as f64;
    let diffs: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    Ok(LossOutput {
        value: pairwise_sum(&abs) / n,
        grad: diffs
            .iter()
            .map(|d| if *d == 0.0 { 0.0 } else { d.signum() / n })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            lambda3: 5.0,
            lambda4: 2.0,
            lambda5: 0.25,
        }
    }
}

impl LossWeights {
    pub fn new(l: [f64; 5]) -> Result<Self> {
        if let Some(n) = l.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("weights", format!("lambda{} = {} must be finite and non-negative", n + 1, l[n])));
        }
        Ok(Self {
            lambda1: l[0],
            lambda2: l[1],
            lambda3: l[2],
            lambda4: l[3],
            lambda5: l[4],
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub focal: f64,
    pub lovasz: f64,
    pub thing: f64,
    pub cls: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLoss {
    pub total: f64,
    pub seg: f64,
    pub det: f64,
}

/// `L_seg = λ1 focal + λ2 lovasz + λ3 thing`, `L_det = λ4 cls + λ5 reg`,
/// `L = L_seg + L_det`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> TotalLoss {
    let seg = w.lambda1 * parts.focal + w.lambda2 * parts.lovasz + w.lambda3 * parts.thing;
    let det = w.lambda4 * parts.cls + w.lambda5 * parts.reg;
    TotalLoss {
        total: seg + det,
        seg,
        det,
    }
}
