use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use occkit::geometry::Pose;
use occkit::grid::densify;
use occkit::harness::{gen_scene, run_gradient_suite, run_pipeline, PipelineMode, PipelineOptions, Profile, SyntheticScene};
use occkit::io::{self, Pvox};
use occkit::metrics::{miou, panoptic_quality, panoptic_quality_dagger, Panoptic};
use occkit::refine::{assign_instances, refine_semantics, Box3D};
use occkit::sparsify::{sparse_coarse_to_fine, SparseSchedule, PAPER_KEEP_RATIOS};
use occkit::supervision::{voxelize_instances, voxelize_majority};
use occkit::temporal::align_volume;
use occkit::{SemanticGrid, Taxonomy};

#[derive(Parser)]
#[command(name = "occkit", version, about = "Panoptic occupancy toolkit")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Tiny)]
    profile: ProfileArg,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Tiny,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Tiny => Profile::Tiny,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Queries,
    Occupancy,
    Supervision,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Miou,
    Pq,
    Pqd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Oracle,
    Features,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene into the output directory.
    GenScene {
        #[arg(long)]
        boxes: Option<usize>,
        #[arg(long)]
        ground_points: Option<usize>,
    },
    /// Majority-vote voxelization of a labeled point cloud.
    Voxelize {
        #[arg(long)]
        points: PathBuf,
        #[command(flatten)]
        classes: ClassesArg,
        #[arg(long, value_enum, default_value_t = GridArg::Occupancy)]
        grid: GridArg,
        #[arg(long)]
        out_sem: PathBuf,
        #[arg(long)]
        out_inst: Option<PathBuf>,
    },
    /// Resample a history feature volume into the current frame.
    Align {
        #[arg(long)]
        volume: PathBuf,
        /// Pose JSON mapping current-frame points into the history frame.
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sparse coarse-to-fine upsampling with per-stage pruning.
    Sparsify {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Dense copy of the result (pruned cells are zero).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Box-driven class refinement and instance assignment.
    Refine {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, default_value_t = occkit::refine::DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = occkit::refine::DEFAULT_OVERLAP)]
        overlap: f64,
        #[command(flatten)]
        classes: ClassesArg,
        #[arg(long)]
        out_sem: PathBuf,
        #[arg(long)]
        out_inst: PathBuf,
    },
    /// mIoU, PQ or PQ-dagger of a prediction against ground truth.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred_inst: Option<PathBuf>,
        #[arg(long)]
        gt_inst: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        classes: ClassesArg,
    },
    /// Finite-difference check of every analytic gradient.
    LossCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// End-to-end run over a synthetic scene.
    RunPipeline {
        /// Scene directory written by gen-scene; generated from --seed when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Oracle)]
        mode: ModeArg,
        /// Use the sparse path with the default keep ratios.
        #[arg(long)]
        sparse: bool,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        no_temporal: bool,
        #[arg(long, value_delimiter = ',')]
        drop_box: Vec<usize>,
        #[arg(long)]
        camera_mask: bool,
        #[arg(long, default_value_t = occkit::refine::DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = occkit::refine::DEFAULT_OVERLAP)]
        overlap: f64,
    },
}

#[derive(Args)]
struct ClassesArg {
    /// Taxonomy JSON; defaults to the 16-class nuScenes split.
    #[arg(long)]
    classes: Option<PathBuf>,
}

impl ClassesArg {
    fn load(&self) -> Result<Taxonomy> {
        match &self.classes {
            None => Ok(Taxonomy::nuscenes()),
            Some(p) => {
                let t: Taxonomy = io::load_json(p).with_context(|| format!("reading {}", p.display()))?;
                t.validate()?;
                Ok(t)
            }
        }
    }
}

fn load_semantic(p: &Path) -> Result<SemanticGrid> {
    io::load_semantic(p).with_context(|| format!("reading {}", p.display()))
}

fn out_path(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn write_pvox(dir: &Path, p: &Path, grid: Pvox) -> Result<PathBuf> {
    let path = out_path(dir, p);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    io::save_pvox(&grid, &path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn run(cli: Cli) -> Result<Value> {
    let profile = Profile::from(cli.profile);
    let dir = cli.out_dir.as_path();
    match cli.command {
        Command::GenScene { boxes, ground_points } => {
            let mut cfg = profile.default_config();
            if let Some(b) = boxes {
                cfg.num_boxes = b;
            }
            if let Some(g) = ground_points {
                cfg.ground_points = g;
            }
            let scene = gen_scene(cli.seed, profile, &cfg)?;
            scene.save(dir)?;
            Ok(json!({
                "scene": dir,
                "frames": scene.frames.len(),
                "boxes": scene.current().boxes.len(),
                "points": scene.current().points().points().len(),
            }))
        }
        Command::Voxelize { points, classes, grid, out_sem, out_inst } => {
            let tax = classes.load()?;
            let pc = io::load_ppts(&points, tax.num_classes).with_context(|| format!("reading {}", points.display()))?;
            let spec = match grid {
                GridArg::Queries => profile.query_spec(),
                GridArg::Occupancy => profile.occupancy_spec(),
                GridArg::Supervision if profile == Profile::Paper => occkit::VoxelGridSpec::paper_supervision(),
                GridArg::Supervision => profile.occupancy_spec().upsampled([2, 2, 2])?,
            };
            let sem = voxelize_majority(&pc, &spec);
            let occupied = sem.labels().iter().filter(|&&l| l != 0).count();
            let inst_path = match out_inst {
                Some(p) => Some(write_pvox(dir, &p, Pvox::Instance(voxelize_instances(&pc, &sem)?))?),
                None => None,
            };
            let sem_path = write_pvox(dir, &out_sem, Pvox::Semantic(sem))?;
            Ok(json!({ "semantic": sem_path, "instance": inst_path, "occupied": occupied }))
        }
        Command::Align { volume, pose, out } => {
            let vol = io::load_dense(&volume).with_context(|| format!("reading {}", volume.display()))?;
            let pose: Pose = io::load_json(&pose).with_context(|| format!("reading {}", pose.display()))?;
            let aligned = align_volume(&vol, &pose);
            let path = write_pvox(dir, &out, Pvox::Dense(aligned))?;
            Ok(json!({ "aligned": path }))
        }
        Command::Sparsify { volume, ratios, out } => {
            let vol = io::load_dense(&volume).with_context(|| format!("reading {}", volume.display()))?;
            let ratios = ratios.unwrap_or_else(|| PAPER_KEEP_RATIOS.to_vec());
            let schedule = SparseSchedule::with_ratios(profile.stages(), &ratios)?;
            let res = sparse_coarse_to_fine(&vol, &schedule)?;
            let path = match out {
                Some(p) => Some(write_pvox(dir, &p, Pvox::Dense(densify(&res.volume)))?),
                None => None,
            };
            Ok(json!({
                "fine_dims": res.volume.spec().dims(),
                "kept": res.kept,
                "candidates": res.candidates,
                "sparsity": res.sparsity(),
                "out": path,
            }))
        }
        Command::Refine { grid, boxes, tau, overlap, classes, out_sem, out_inst } => {
            let tax = classes.load()?;
            let sem = load_semantic(&grid)?;
            let file = File::open(&boxes).with_context(|| format!("reading {}", boxes.display()))?;
            let boxes: Vec<Box3D> = io::read_json_lines(BufReader::new(file))?;
            let refined = refine_semantics(&sem, &boxes, tau, &tax.thing)?;
            let inst = assign_instances(&refined, &boxes, tau, overlap, &tax.thing)?;
            let instances = inst.num_instances();
            let s = write_pvox(dir, &out_sem, Pvox::Semantic(refined))?;
            let i = write_pvox(dir, &out_inst, Pvox::Instance(inst))?;
            Ok(json!({ "semantic": s, "instance": i, "instances": instances }))
        }
        Command::Eval { mode, pred, gt, pred_inst, gt_inst, mask, classes } => {
            let tax = classes.load()?;
            let p = load_semantic(&pred)?;
            let g = load_semantic(&gt)?;
            match mode {
                EvalMode::Miou => {
                    let m = match mask {
                        Some(path) => Some(io::load_mask(&path).with_context(|| format!("reading {}", path.display()))?),
                        None => None,
                    };
                    Ok(serde_json::to_value(miou(&p, &g, m.as_ref(), &tax.eval_classes())?)?)
                }
                EvalMode::Pq | EvalMode::Pqd => {
                    let (Some(pi), Some(gi)) = (pred_inst, gt_inst) else {
                        bail!("--pred-inst and --gt-inst are required for panoptic metrics");
                    };
                    let pi = io::load_instance(&pi)?;
                    let gi = io::load_instance(&gi)?;
                    let (pp, gp) = (Panoptic::new(&p, &pi)?, Panoptic::new(&g, &gi)?);
                    let stats = match mode {
                        EvalMode::Pq => panoptic_quality(pp, gp, &tax.thing, &tax.stuff)?,
                        _ => panoptic_quality_dagger(pp, gp, &tax.thing, &tax.stuff)?,
                    };
                    Ok(serde_json::to_value(stats)?)
                }
            }
        }
        Command::LossCheck { instances } => {
            let report = run_gradient_suite(cli.seed, instances);
            if !report.passed {
                bail!("gradient check failed: {}", serde_json::to_string(&report)?);
            }
            Ok(serde_json::to_value(report)?)
        }
        Command::RunPipeline { scene, mode, sparse, ratios, no_temporal, drop_box, camera_mask, tau, overlap } => {
            let scene = match scene {
                Some(d) => SyntheticScene::load(&d).with_context(|| format!("loading scene {}", d.display()))?,
                None => gen_scene(cli.seed, profile, &profile.default_config())?,
            };
            let sparse_ratios = match (sparse, ratios) {
                (_, Some(r)) => Some(r),
                (true, None) => Some(PAPER_KEEP_RATIOS.to_vec()),
                (false, None) => None,
            };
            let opts = PipelineOptions {
                mode: match mode {
                    ModeArg::Oracle => PipelineMode::Oracle,
                    ModeArg::Features => PipelineMode::Features,
                },
                temporal: !no_temporal,
                sparse_ratios,
                tau,
                overlap,
                drop_boxes: drop_box,
                camera_mask,
            };
            let out = run_pipeline(&scene, &opts)?;
            std::fs::create_dir_all(dir)?;
            io::save_json(&out.report, dir.join("report.json"))?;
            Ok(serde_json::to_value(&out.report)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": e.to_string(), "causes": chain }));
            ExitCode::FAILURE
        }
    }
}
