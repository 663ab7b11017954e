//! Synthetic multi-frame scenes: cuboid things on a stuff ground plane, seen
//! from an ego vehicle driving through a static world.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{camera_ring, CameraModel, Pose};
use crate::grid::{InstanceGrid, SemanticGrid, VoxelGridSpec};
use crate::io;
use crate::refine::Box3D;
use crate::sparsify::{paper_stages, tiny_stages, UpsampleStage};
use crate::supervision::{voxelize_instances, voxelize_majority, LabeledPoint, LabeledPointCloud};
use crate::taxonomy::Taxonomy;

/// Grid sizes used for scenes and pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 20x20x8 queries upsampled to 40x40x16 over a 51.2 m square.
    Tiny,
    /// 50x50x16 queries upsampled to 200x200x32 over a 102.4 m square.
    Paper,
}

impl Profile {
    pub fn query_spec(self) -> VoxelGridSpec {
        match self {
            Profile::Tiny => VoxelGridSpec::covering([20, 20, 8], [-25.6, -25.6, -5.0], [25.6, 25.6, 3.0])
                .expect("valid preset"),
            Profile::Paper => VoxelGridSpec::paper_queries(),
        }
    }

    pub fn occupancy_spec(self) -> VoxelGridSpec {
        match self {
            Profile::Tiny => VoxelGridSpec::covering([40, 40, 16], [-25.6, -25.6, -5.0], [25.6, 25.6, 3.0])
                .expect("valid preset"),
            Profile::Paper => VoxelGridSpec::paper_occupancy(),
        }
    }

    pub fn stages(self) -> Vec<UpsampleStage> {
        match self {
            Profile::Tiny => tiny_stages(),
            Profile::Paper => paper_stages(),
        }
    }

    pub fn default_config(self) -> SceneConfig {
        let base = SceneConfig::default();
        match self {
            Profile::Tiny => base,
            Profile::Paper => SceneConfig {
                num_boxes: 12,
                points_per_box: 1500,
                ground_points: 60_000,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_boxes: usize,
    /// Frames including the current one.
    pub num_frames: usize,
    /// Seconds between frames.
    pub frame_interval: f64,
    /// Forward ego speed, m/s.
    pub ego_speed: f64,
    /// Ego yaw rate, rad/s.
    pub ego_yaw_rate: f64,
    pub points_per_box: usize,
    pub ground_points: usize,
    pub num_cameras: usize,
    pub camera_height: f64,
    pub focal: f64,
    pub image_size: [usize; 2],
    pub taxonomy: Taxonomy,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_boxes: 6,
            num_frames: 4,
            frame_interval: 0.5,
            ego_speed: 5.0,
            ego_yaw_rate: 0.04,
            points_per_box: 600,
            ground_points: 20_000,
            num_cameras: 6,
            camera_height: 1.6,
            focal: 800.0,
            image_size: [1600, 900],
            taxonomy: Taxonomy::nuscenes(),
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        self.taxonomy.validate()?;
        if self.num_frames == 0 {
            return Err(invalid("num_frames", "need at least the current frame"));
        }
        if self.num_boxes > 0 && (self.taxonomy.thing.is_empty() || self.points_per_box == 0) {
            return Err(invalid("config", "boxes need thing classes and points"));
        }
        if self.ground_points > 0 && self.taxonomy.stuff.is_empty() {
            return Err(invalid("config", "ground points need stuff classes"));
        }
        if !(self.frame_interval.is_finite() && self.ego_speed.is_finite() && self.ego_yaw_rate.is_finite()) {
            return Err(invalid("config", "motion parameters must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Seconds relative to the current frame (0 for the current one).
    pub timestamp: f64,
    pub ego_to_world: Pose,
    /// Points in this frame's ego coordinates.
    #[serde(skip)]
    pub points: Option<LabeledPointCloud>,
    /// Ground-truth boxes in this frame's ego coordinates, score 1.
    pub boxes: Vec<Box3D>,
}

impl Frame {
    pub fn points(&self) -> &LabeledPointCloud {
        self.points.as_ref().expect("frame points are loaded with the scene")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub profile: Profile,
    pub config: SceneConfig,
    /// Oldest first; the last frame is current and its ego frame is the
    /// world frame.
    pub frames: Vec<Frame>,
    pub cameras: Vec<CameraModel>,
}

fn ego_frame(n: usize) -> String {
    format!("ego{n}")
}

/// Surface point of a box, in its local frame, uniform over area.
fn surface_point(rng: &mut ChaCha8Rng, size: [f64; 3]) -> [f64; 3] {
    let [l, w, h] = size;
    let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    while face < 5 && pick >= areas[face] {
        pick -= areas[face];
        face += 1;
    }
    let mut p = [
        rng.gen_range(-l / 2.0..l / 2.0),
        rng.gen_range(-w / 2.0..w / 2.0),
        rng.gen_range(-h / 2.0..h / 2.0),
    ];
    let axis = face / 2;
    p[axis] = if face % 2 == 0 { -size[axis] / 2.0 } else { size[axis] / 2.0 };
    p
}

fn local_to_world(b: &Box3D, p: [f64; 3]) -> [f64; 3] {
    let (s, c) = b.yaw().sin_cos();
    let ctr = b.center();
    [c * p[0] - s * p[1] + ctr[0], s * p[0] + c * p[1] + ctr[1], p[2] + ctr[2]]
}

fn rounded(p: [f64; 3]) -> [f32; 3] {
    p.map(|v| v as f32)
}

const MAX_ATTEMPTS: usize = 10_000;
const EDGE_MARGIN: f64 = 4.0;

/// Places disjoint boxes and samples their surface points. Only points whose
/// occupancy voxel center lies inside their box are kept, so every
/// ground-truth thing voxel sits inside its box.
fn place_boxes(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    spec: &VoxelGridSpec,
) -> Result<Vec<(Box3D, Vec<LabeledPoint>)>> {
    let things: Vec<u16> = cfg.taxonomy.thing.iter().copied().collect();
    let o = spec.origin();
    let e = spec.extent();
    let cell = spec.cell_size();
    let gap = 2.0 * cell[0].max(cell[1]);
    let mut placed: Vec<(Box3D, Vec<LabeledPoint>)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < cfg.num_boxes {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(invalid("num_boxes", format!("could not place {} disjoint boxes", cfg.num_boxes)));
        }
        let size = [rng.gen_range(1.5..4.5), rng.gen_range(1.2..2.4), rng.gen_range(1.2..2.5)];
        let bottom = rng.gen_range(-3.0..-2.5);
        let center = [
            rng.gen_range(o[0] + EDGE_MARGIN..o[0] + e[0] - EDGE_MARGIN),
            rng.gen_range(o[1] + EDGE_MARGIN..o[1] + e[1] - EDGE_MARGIN),
            bottom + size[2] / 2.0,
        ];
        let yaw = rng.gen_range(-PI..PI);
        let class = things[rng.gen_range(0..things.len())];
        let b = Box3D::new(center, size, yaw, class, 1.0)?;
        let radius = |b: &Box3D| 0.5 * b.size()[0].hypot(b.size()[1]);
        let clear = placed.iter().all(|(q, _)| {
            let d = (q.center()[0] - center[0]).hypot(q.center()[1] - center[1]);
            d > radius(q) + radius(&b) + gap
        });
        if !clear {
            continue;
        }
        let instance = placed.len() as u32 + 1;
        let mut pts = Vec::with_capacity(cfg.points_per_box);
        for _ in 0..cfg.points_per_box {
            let p = rounded(local_to_world(&b, surface_point(rng, size)));
            let pf = p.map(f64::from);
            let inside = spec
                .world_to_index(pf)
                .is_some_and(|idx| b.contains(spec.index_to_center(idx).expect("in range")));
            if inside {
                pts.push(LabeledPoint {
                    position: p,
                    label: class,
                    instance,
                });
            }
        }
        if !pts.is_empty() {
            placed.push((b, pts));
        }
    }
    Ok(placed)
}

/// Ground points in `z in [-4.0, -3.9]`, stuff class chosen by `|y|` band.
fn ground(rng: &mut ChaCha8Rng, cfg: &SceneConfig, spec: &VoxelGridSpec) -> Vec<LabeledPoint> {
    let stuff: Vec<u16> = cfg.taxonomy.stuff.iter().copied().collect();
    let (o, e) = (spec.origin(), spec.extent());
    (0..cfg.ground_points)
        .map(|_| {
            let x = rng.gen_range(o[0]..o[0] + e[0]);
            let y = rng.gen_range(o[1]..o[1] + e[1]);
            let z = rng.gen_range(-4.0..-3.9);
            let band = (y.abs() / 6.0) as usize % stuff.len();
            LabeledPoint {
                position: rounded([x, y, z]),
                label: stuff[band],
                instance: 0,
            }
        })
        .collect()
}

/// Deterministic scene for `seed`. World coordinates coincide with the
/// current ego frame.
pub fn gen_scene(seed: u64, profile: Profile, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = profile.occupancy_spec();
    let boxes = place_boxes(&mut rng, cfg, &spec)?;
    let mut world_pts: Vec<LabeledPoint> = boxes.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    world_pts.extend(ground(&mut rng, cfg, &spec));
    let cameras = camera_ring(cfg.num_cameras, cfg.camera_height, cfg.focal, cfg.image_size)?;

    let n = cfg.num_frames;
    let current = n - 1;
    let mut frames = Vec::with_capacity(n);
    for f in 0..n {
        let t = -((current - f) as f64) * cfg.frame_interval;
        let ego_to_world = Pose::from_yaw_translation(
            cfg.ego_yaw_rate * t,
            [cfg.ego_speed * t, 0.0, 0.0],
            ego_frame(f),
            "world",
        );
        let (points, frame_boxes) = if f == current {
            (world_pts.clone(), boxes.iter().map(|(b, _)| *b).collect())
        } else {
            let to_ego = ego_to_world.invert();
            let pts = world_pts
                .iter()
                .map(|p| LabeledPoint {
                    position: rounded(to_ego.transform_point(p.position_f64())),
                    ..*p
                })
                .collect();
            let yaw = cfg.ego_yaw_rate * t;
            let bxs = boxes
                .iter()
                .map(|(b, _)| Box3D::new(to_ego.transform_point(b.center()), b.size(), b.yaw() - yaw, b.class(), 1.0))
                .collect::<Result<Vec<_>>>()?;
            (pts, bxs)
        };
        frames.push(Frame {
            timestamp: t,
            ego_to_world,
            points: Some(LabeledPointCloud::new(points, cfg.taxonomy.num_classes)?),
            boxes: frame_boxes,
        });
    }
    Ok(SyntheticScene {
        seed,
        profile,
        config: cfg.clone(),
        frames,
        cameras,
    })
}

const SCENE_FILE: &str = "scene.json";

fn frame_file(n: usize) -> String {
    format!("frame{n}.ppts")
}

impl SyntheticScene {
    pub fn taxonomy(&self) -> &Taxonomy {
        &self.config.taxonomy
    }

    pub fn current(&self) -> &Frame {
        self.frames.last().expect("scenes have at least one frame")
    }

    pub fn occupancy_spec(&self) -> VoxelGridSpec {
        self.profile.occupancy_spec()
    }

    pub fn gt_semantic(&self) -> SemanticGrid {
        voxelize_majority(self.current().points(), &self.occupancy_spec())
    }

    pub fn gt_instance(&self, semantic: &SemanticGrid) -> Result<InstanceGrid> {
        voxelize_instances(self.current().points(), semantic)
    }

    /// Transform from the current ego frame to the ego frame of `frame`.
    pub fn cur_to_frame(&self, frame: usize) -> Result<Pose> {
        let target = self
            .frames
            .get(frame)
            .ok_or_else(|| invalid("frame", format!("{frame} >= {}", self.frames.len())))?;
        target.ego_to_world.invert().compose(&self.current().ego_to_world)
    }

    /// Writes `scene.json`, one PPTS file per frame and the ground-truth
    /// grids.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        io::save_json(self, dir.join(SCENE_FILE))?;
        for (n, f) in self.frames.iter().enumerate() {
            io::save_ppts(f.points(), dir.join(frame_file(n)))?;
        }
        let sem = self.gt_semantic();
        let inst = self.gt_instance(&sem)?;
        io::save_pvox(&io::Pvox::Semantic(sem), dir.join("gt_semantic.pvox"))?;
        io::save_pvox(&io::Pvox::Instance(inst), dir.join("gt_instance.pvox"))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut scene: SyntheticScene = io::load_json(dir.join(SCENE_FILE))?;
        scene.config.taxonomy.validate()?;
        if scene.frames.is_empty() {
            return Err(Error::Empty("scene frames"));
        }
        let c = scene.config.taxonomy.num_classes;
        for (n, f) in scene.frames.iter_mut().enumerate() {
            f.points = Some(io::load_ppts(dir.join(frame_file(n)), c)?);
        }
        Ok(scene)
    }
}
