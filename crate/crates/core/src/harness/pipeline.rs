//! End-to-end run over a synthetic scene with deterministic stand-ins for the
//! learned stages.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::visible_views;
use crate::grid::{densify, BinaryMask, DenseVolume, InstanceGrid, SemanticGrid, VoxelGridSpec};
use crate::metrics::{miou, panoptic_quality, panoptic_quality_dagger, MiouReport, PQStats, Panoptic};
use crate::refine::{assign_instances, refine_semantics, Box3D, DEFAULT_OVERLAP, DEFAULT_TAU};
use crate::sparsify::{coarse_to_fine, sparse_coarse_to_fine, SparseSchedule};
use crate::supervision::LabeledPointCloud;
use crate::temporal::{align_volume, average_mix, fuse_concat, linear_fuse};

use super::scene::{Profile, SyntheticScene};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    /// Predictions are the ground-truth grids.
    Oracle,
    /// Predictions come from per-class point histograms on the query grid,
    /// aligned, fused and upsampled.
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub mode: PipelineMode,
    /// Align and fuse history frames (features mode).
    pub temporal: bool,
    /// Keep ratios per upsampling stage; `None` runs the dense path.
    pub sparse_ratios: Option<Vec<f64>>,
    pub tau: f64,
    pub overlap: f64,
    /// Indices into the current frame's boxes left out of the predictions.
    pub drop_boxes: Vec<usize>,
    /// Restrict mIoU to voxels whose center some camera sees.
    pub camera_mask: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            mode: PipelineMode::Oracle,
            temporal: true,
            sparse_ratios: None,
            tau: DEFAULT_TAU,
            overlap: DEFAULT_OVERLAP,
            drop_boxes: Vec::new(),
            camera_mask: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub profile: Profile,
    pub seed: u64,
    pub options: PipelineOptions,
    pub occupancy_dims: [usize; 3],
    /// Final kept cells over fine-grid cells (sparse path only).
    pub sparsity: Option<f64>,
    pub kept_per_stage: Option<Vec<usize>>,
    pub boxes_used: usize,
    pub miou: MiouReport,
    pub pq: PQStats,
    pub pq_dagger: PQStats,
    /// Wall-clock milliseconds per stage.
    pub timings_ms: BTreeMap<String, f64>,
}

impl PipelineReport {
    /// The report without timings, for reproducibility comparisons.
    pub fn deterministic_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timings_ms");
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub semantic: SemanticGrid,
    pub instance: InstanceGrid,
}

struct Timer {
    start: Instant,
    timings: BTreeMap<String, f64>,
}

impl Timer {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            timings: BTreeMap::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings
            .insert(stage.to_string(), (now - self.start).as_secs_f64() * 1e3);
        self.start = now;
    }
}

/// Per-class fraction of the points in each cell, channels `1..=C`.
pub fn class_histogram(pc: &LabeledPointCloud, spec: &VoxelGridSpec) -> DenseVolume {
    let c = pc.num_classes() as usize;
    let mut counts = vec![0.0; spec.num_cells() * c];
    let mut totals = vec![0.0; spec.num_cells()];
    for p in pc.points() {
        if let Some(idx) = spec.world_to_index(p.position_f64()) {
            let n = spec.linear(idx);
            counts[n * c + p.label as usize - 1] += 1.0;
            totals[n] += 1.0;
        }
    }
    for (row, t) in counts.chunks_mut(c).zip(&totals) {
        if *t > 0.0 {
            row.iter_mut().for_each(|v| *v /= t);
        }
    }
    DenseVolume::new(*spec, c, counts).expect("finite fractions")
}

/// Class `argmax + 1` where the winning fraction reaches one half, else 0.
pub fn decode_labels(vol: &DenseVolume, num_classes: u16) -> SemanticGrid {
    let labels = vol
        .data()
        .chunks(vol.channels())
        .map(|f| {
            let (best, v) = f
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (n, &v)| if v > acc.1 { (n, v) } else { acc });
            if v >= 0.5 {
                best as u16 + 1
            } else {
                0
            }
        })
        .collect();
    SemanticGrid::new(*vol.spec(), num_classes, labels).expect("labels within class range")
}

/// Voxels whose center projects into at least one camera.
pub fn camera_visibility(scene: &SyntheticScene, spec: &VoxelGridSpec) -> BinaryMask {
    let bits = spec
        .coords()
        .map(|c| !visible_views(&scene.cameras, spec.center(c)).is_empty())
        .collect();
    BinaryMask::new(*spec, bits).expect("one bit per cell")
}

pub fn run_pipeline(scene: &SyntheticScene, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let mut timer = Timer::new();
    let tax = scene.taxonomy();
    let spec = scene.occupancy_spec();
    let gt_sem = scene.gt_semantic();
    let gt_inst = scene.gt_instance(&gt_sem)?;
    timer.lap("voxelize");

    let current = scene.current();
    if let Some(&bad) = opts.drop_boxes.iter().find(|&&n| n >= current.boxes.len()) {
        return Err(invalid("drop_boxes", format!("box {bad} of {}", current.boxes.len())));
    }
    let boxes: Vec<Box3D> = current
        .boxes
        .iter()
        .enumerate()
        .filter(|(n, _)| !opts.drop_boxes.contains(n))
        .map(|(_, b)| *b)
        .collect();

    let mut sparsity = None;
    let mut kept_per_stage = None;
    let pred = match opts.mode {
        PipelineMode::Oracle => gt_sem.clone(),
        PipelineMode::Features => {
            let qspec = scene.profile.query_spec();
            let cur = class_histogram(current.points(), &qspec);
            let fused = if opts.temporal && scene.frames.len() > 1 {
                let last = scene.frames.len() - 1;
                let history = (0..last)
                    .map(|f| Ok(align_volume(&class_histogram(scene.frames[f].points(), &qspec), &scene.cur_to_frame(f)?)))
                    .collect::<Result<Vec<_>>>()?;
                let concat = fuse_concat(&cur, &history)?;
                linear_fuse(&concat, &average_mix(scene.frames.len(), cur.channels()))?
            } else {
                cur
            };
            timer.lap("encode");
            let fine = match &opts.sparse_ratios {
                None => coarse_to_fine(&fused, &scene.profile.stages())?,
                Some(r) => {
                    let out = sparse_coarse_to_fine(&fused, &SparseSchedule::with_ratios(scene.profile.stages(), r)?)?;
                    sparsity = Some(out.sparsity());
                    kept_per_stage = Some(out.kept.clone());
                    densify(&out.volume)
                }
            };
            fine.spec().check_same(&spec, "upsampled volume and occupancy grid")?;
            timer.lap("upsample");
            decode_labels(&fine, tax.num_classes)
        }
    };

    let refined = refine_semantics(&pred, &boxes, opts.tau, &tax.thing)?;
    let inst = assign_instances(&refined, &boxes, opts.tau, opts.overlap, &tax.thing)?;
    timer.lap("refine");

    let mask = opts.camera_mask.then(|| camera_visibility(scene, &spec));
    let miou_report = miou(&refined, &gt_sem, mask.as_ref(), &tax.eval_classes())?;
    let p = Panoptic::new(&refined, &inst)?;
    let g = Panoptic::new(&gt_sem, &gt_inst)?;
    let pq = panoptic_quality(p, g, &tax.thing, &tax.stuff)?;
    let pq_dagger = panoptic_quality_dagger(p, g, &tax.thing, &tax.stuff)?;
    timer.lap("evaluate");

    Ok(PipelineOutput {
        report: PipelineReport {
            schema_version: REPORT_SCHEMA_VERSION,
            profile: scene.profile,
            seed: scene.seed,
            options: opts.clone(),
            occupancy_dims: spec.dims(),
            sparsity,
            kept_per_stage,
            boxes_used: boxes.len(),
            miou: miou_report,
            pq,
            pq_dagger,
            timings_ms: timer.timings,
        },
        semantic: refined,
        instance: inst,
    })
}
