//! Semantic and panoptic evaluation: confusion-matrix mIoU, PQ and PQ†.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, InstanceGrid, SemanticGrid};

/// Segments match when their IoU exceeds this value.
pub const MATCH_IOU: f64 = 0.5;

/// `(C+1) x (C+1)` counts, rows indexed by ground truth and columns by
/// prediction, over classes `0..=C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: u16) -> Self {
        let size = num_classes as usize + 1;
        Self {
            size,
            counts: vec![0; size * size],
        }
    }

    /// Accumulates every cell that is inside `mask` (when given) and not
    /// ignored in either grid.
    pub fn from_grids(pred: &SemanticGrid, gt: &SemanticGrid, mask: Option<&BinaryMask>) -> Result<Self> {
        check_pair(pred, gt)?;
        if let Some(m) = mask {
            gt.spec().check_same(m.spec(), "evaluation mask")?;
        }
        let ignore = gt.ignore_label();
        let size = gt.num_classes() as usize + 1;
        let (p, g) = (pred.labels(), gt.labels());
        let counts = (0..p.len())
            .into_par_iter()
            .fold(
                || vec![0u64; size * size],
                |mut acc, n| {
                    if mask.is_none_or(|m| m.bits()[n]) && p[n] != ignore && g[n] != ignore {
                        acc[g[n] as usize * size + p[n] as usize] += 1;
                    }
                    acc
                },
            )
            .reduce(
                || vec![0u64; size * size],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    a
                },
            );
        Ok(Self { size, counts })
    }

    pub fn get(&self, gt: u16, pred: u16) -> u64 {
        self.counts[gt as usize * self.size + pred as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(TP, FP, FN)` of one class.
    pub fn class_counts(&self, c: u16) -> (u64, u64, u64) {
        let c = c as usize;
        let tp = self.counts[c * self.size + c];
        let row: u64 = self.counts[c * self.size..(c + 1) * self.size].iter().sum();
        let col: u64 = (0..self.size).map(|r| self.counts[r * self.size + c]).sum();
        (tp, col - tp, row - tp)
    }
}

fn check_pair(pred: &SemanticGrid, gt: &SemanticGrid) -> Result<()> {
    pred.spec().check_same(gt.spec(), "prediction and ground truth")?;
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "prediction has {} classes, ground truth {}",
            pred.num_classes(),
            gt.num_classes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU of every requested class present in prediction or ground truth.
    pub per_class: BTreeMap<u16, f64>,
    pub mean: f64,
    pub evaluated_cells: u64,
}

/// Mean IoU over `class_set`; classes absent from both grids (on the
/// evaluated cells) are left out of the mean.
pub fn miou(
    pred: &SemanticGrid,
    gt: &SemanticGrid,
    eval_mask: Option<&BinaryMask>,
    class_set: &BTreeSet<u16>,
) -> Result<MiouReport> {
    let cm = ConfusionMatrix::from_grids(pred, gt, eval_mask)?;
    if cm.total() == 0 {
        return Err(Error::Empty("evaluated cells"));
    }
    if let Some(&c) = class_set.iter().find(|&&c| c > gt.num_classes()) {
        return Err(crate::error::invalid("class_set", format!("class {c} > {}", gt.num_classes())));
    }
    let mut per_class = BTreeMap::new();
    for &c in class_set {
        let (tp, fp, fn_) = cm.class_counts(c);
        let denom = tp + fp + fn_;
        if denom > 0 {
            per_class.insert(c, tp as f64 / denom as f64);
        }
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(MiouReport {
        per_class,
        mean,
        evaluated_cells: cm.total(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPQ {
    pub class: u16,
    pub thing: bool,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl ClassPQ {
    fn from_counts(class: u16, thing: bool, tp: u64, fp: u64, fn_: u64, iou_sum: f64) -> Self {
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        let (pq, rq) = if denom > 0.0 {
            (iou_sum / denom, tp as f64 / denom)
        } else {
            (0.0, 0.0)
        };
        let sq = if tp > 0 { iou_sum / tp as f64 } else { 0.0 };
        Self {
            class,
            thing,
            tp,
            fp,
            fn_,
            iou_sum,
            pq,
            sq,
            rq,
        }
    }
}

/// Per-class statistics (classes with any gt or predicted segment) and their
/// means. `pq_thing` / `pq_stuff` are `None` when no class of that kind
/// takes part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PQStats {
    pub per_class: Vec<ClassPQ>,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_thing: Option<f64>,
    pub pq_stuff: Option<f64>,
}

impl PQStats {
    fn from_classes(per_class: Vec<ClassPQ>) -> Self {
        let mean = |f: &dyn Fn(&ClassPQ) -> f64, filt: &dyn Fn(&ClassPQ) -> bool| {
            let v: Vec<f64> = per_class.iter().filter(|c| filt(c)).map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            pq: mean(&|c| c.pq, &|_| true).unwrap_or(0.0),
            sq: mean(&|c| c.sq, &|_| true).unwrap_or(0.0),
            rq: mean(&|c| c.rq, &|_| true).unwrap_or(0.0),
            pq_thing: mean(&|c| c.pq, &|c| c.thing),
            pq_stuff: mean(&|c| c.pq, &|c| !c.thing),
            per_class,
        }
    }

    pub fn class(&self, c: u16) -> Option<&ClassPQ> {
        self.per_class.iter().find(|s| s.class == c)
    }
}

/// Segment key: `(class, instance)` for things, `(class, 0)` for stuff.
type SegKey = (u16, u32);

/// Panoptic prediction or ground truth.
#[derive(Debug, Clone, Copy)]
pub struct Panoptic<'a> {
    pub semantic: &'a SemanticGrid,
    pub instance: &'a InstanceGrid,
}

impl<'a> Panoptic<'a> {
    pub fn new(semantic: &'a SemanticGrid, instance: &'a InstanceGrid) -> Result<Self> {
        semantic.spec().check_same(instance.spec(), "semantic and instance grids")?;
        Ok(Self { semantic, instance })
    }
}

struct ClassSets<'a> {
    thing: &'a BTreeSet<u16>,
    stuff: &'a BTreeSet<u16>,
}

impl ClassSets<'_> {
    /// Segment of one cell, if any. Thing cells without an instance ID and
    /// cells of classes outside both sets belong to no segment.
    fn key(&self, label: u16, id: u32) -> Option<SegKey> {
        if self.thing.contains(&label) {
            (id != 0).then_some((label, id))
        } else if self.stuff.contains(&label) {
            Some((label, 0))
        } else {
            None
        }
    }

    fn all(&self) -> BTreeSet<u16> {
        self.thing.union(self.stuff).copied().collect()
    }
}

fn validate(pred: &Panoptic, gt: &Panoptic, thing: &BTreeSet<u16>, stuff: &BTreeSet<u16>) -> Result<()> {
    check_pair(pred.semantic, gt.semantic)?;
    pred.semantic.spec().check_same(pred.instance.spec(), "prediction grids")?;
    gt.semantic.spec().check_same(gt.instance.spec(), "ground-truth grids")?;
    if let Some(c) = thing.intersection(stuff).next() {
        return Err(crate::error::invalid("classes", format!("class {c} is both thing and stuff")));
    }
    Ok(())
}

/// Segment keys of each evaluated cell (ignore cells in either grid
/// skipped).
fn cell_keys<'a>(
    pred: &'a Panoptic,
    gt: &'a Panoptic,
    sets: &'a ClassSets,
) -> impl Iterator<Item = (Option<SegKey>, Option<SegKey>)> + 'a {
    let ignore = gt.semantic.ignore_label();
    let (pl, pi) = (pred.semantic.labels(), pred.instance.ids());
    let (gl, gi) = (gt.semantic.labels(), gt.instance.ids());
    (0..pl.len())
        .filter(move |&n| pl[n] != ignore && gl[n] != ignore)
        .map(move |n| (sets.key(pl[n], pi[n]), sets.key(gl[n], gi[n])))
}

fn summarize(
    classes: &BTreeSet<u16>,
    sets: &ClassSets,
    gt_area: &BTreeMap<SegKey, u64>,
    pred_area: &BTreeMap<SegKey, u64>,
    matches: &BTreeMap<SegKey, (SegKey, f64)>,
) -> Vec<ClassPQ> {
    let mut out = Vec::new();
    for &c in classes {
        let gts = gt_area.keys().filter(|k| k.0 == c).count() as u64;
        let preds = pred_area.keys().filter(|k| k.0 == c).count() as u64;
        let mut tp = 0;
        let mut iou_sum = 0.0;
        for (_, (_, iou)) in matches.iter().filter(|(g, _)| g.0 == c) {
            tp += 1;
            iou_sum += iou;
        }
        if gts + preds == 0 {
            continue;
        }
        out.push(ClassPQ::from_counts(c, sets.thing.contains(&c), tp, preds - tp, gts - tp, iou_sum));
    }
    out
}

/// Panoptic quality with segments matched per class at IoU > 0.5. Means run
/// over classes with at least one gt or predicted segment.
pub fn panoptic_quality(
    pred: Panoptic,
    gt: Panoptic,
    thing_classes: &BTreeSet<u16>,
    stuff_classes: &BTreeSet<u16>,
) -> Result<PQStats> {
    validate(&pred, &gt, thing_classes, stuff_classes)?;
    let sets = ClassSets {
        thing: thing_classes,
        stuff: stuff_classes,
    };
    let mut gt_area: BTreeMap<SegKey, u64> = BTreeMap::new();
    let mut pred_area: BTreeMap<SegKey, u64> = BTreeMap::new();
    let mut inter: BTreeMap<(SegKey, SegKey), u64> = BTreeMap::new();
    for (p, g) in cell_keys(&pred, &gt, &sets) {
        if let Some(p) = p {
            *pred_area.entry(p).or_default() += 1;
        }
        if let Some(g) = g {
            *gt_area.entry(g).or_default() += 1;
        }
        if let (Some(p), Some(g)) = (p, g) {
            if p.0 == g.0 {
                *inter.entry((g, p)).or_default() += 1;
            }
        }
    }
    let mut matches = BTreeMap::new();
    for (&(g, p), &i) in &inter {
        let union = gt_area[&g] + pred_area[&p] - i;
        let iou = i as f64 / union as f64;
        if iou > MATCH_IOU {
            matches.insert(g, (p, iou));
        }
    }
    Ok(PQStats::from_classes(summarize(&sets.all(), &sets, &gt_area, &pred_area, &matches)))
}

/// PQ for thing classes; each stuff class scores the plain IoU of its
/// predicted and gt regions (`sq` = IoU, `rq` = 1).
pub fn panoptic_quality_dagger(
    pred: Panoptic,
    gt: Panoptic,
    thing_classes: &BTreeSet<u16>,
    stuff_classes: &BTreeSet<u16>,
) -> Result<PQStats> {
    let base = panoptic_quality(pred, gt, thing_classes, stuff_classes)?;
    let cm = ConfusionMatrix::from_grids(pred.semantic, gt.semantic, None)?;
    let per_class = base
        .per_class
        .into_iter()
        .map(|mut c| {
            if !c.thing {
                let (tp, fp, fn_) = cm.class_counts(c.class);
                let iou = tp as f64 / (tp + fp + fn_) as f64;
                c.pq = iou;
                c.sq = iou;
                c.rq = 1.0;
            }
            c
        })
        .collect();
    Ok(PQStats::from_classes(per_class))
}

/// Exhaustive reference for [`panoptic_quality`]: lists every segment,
/// scores every same-class pair by a full cell scan, and checks that no
/// segment is matched twice.
pub fn brute_force_pq_oracle(
    pred: Panoptic,
    gt: Panoptic,
    thing_classes: &BTreeSet<u16>,
    stuff_classes: &BTreeSet<u16>,
) -> Result<PQStats> {
    validate(&pred, &gt, thing_classes, stuff_classes)?;
    let sets = ClassSets {
        thing: thing_classes,
        stuff: stuff_classes,
    };
    let cells: Vec<(Option<SegKey>, Option<SegKey>)> = cell_keys(&pred, &gt, &sets).collect();
    let gt_segs: BTreeSet<SegKey> = cells.iter().filter_map(|c| c.1).collect();
    let pred_segs: BTreeSet<SegKey> = cells.iter().filter_map(|c| c.0).collect();
    if gt_segs.len() + pred_segs.len() > 64 {
        return Err(crate::error::invalid("segments", "oracle limited to 64 segments"));
    }
    let area = |which: usize, k: SegKey| {
        cells
            .iter()
            .filter(|c| if which == 0 { c.0 == Some(k) } else { c.1 == Some(k) })
            .count() as u64
    };
    let gt_area: BTreeMap<SegKey, u64> = gt_segs.iter().map(|&k| (k, area(1, k))).collect();
    let pred_area: BTreeMap<SegKey, u64> = pred_segs.iter().map(|&k| (k, area(0, k))).collect();

    let mut matches = BTreeMap::new();
    let mut pred_matched = BTreeSet::new();
    for &g in &gt_segs {
        for &p in &pred_segs {
            if g.0 != p.0 {
                continue;
            }
            let i = cells.iter().filter(|c| c.0 == Some(p) && c.1 == Some(g)).count() as u64;
            let u = cells.iter().filter(|c| c.0 == Some(p) || c.1 == Some(g)).count() as u64;
            let iou = i as f64 / u as f64;
            if iou > MATCH_IOU
                && (matches.insert(g, (p, iou)).is_some() || !pred_matched.insert(p)) {
                    return Err(Error::DimensionMismatch(format!(
                        "segment matched twice: gt {g:?} / pred {p:?}"
                    )));
                }
        }
    }
    Ok(PQStats::from_classes(summarize(&sets.all(), &sets, &gt_area, &pred_area, &matches)))
}
