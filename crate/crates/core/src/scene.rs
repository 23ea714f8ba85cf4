//! Procedural multi-agent worlds: object layout, ray-cast observation,
//! bird's-eye-view voxelization and detection targets.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{Read, Write};

use autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rect, Se2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Side of the square world, meters; the world spans `[-extent/2, extent/2]²`.
    pub extent: f64,
    pub min_agents: usize,
    pub max_agents: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Non-ego agents are placed within this distance of agent 0.
    pub agent_spread: f64,
    pub min_agent_separation: f64,
    /// Object centers are placed within this distance of agent 0.
    pub object_radius: f64,
    pub object_width: [f64; 2],
    pub object_length: [f64; 2],
    pub object_height: [f64; 2],
    /// Minimum free space between objects, meters.
    pub object_gap: f64,
    /// Minimum distance from any agent to any object, meters.
    pub agent_clearance: f64,
    /// Agent headings are drawn from `[-max_yaw, max_yaw]`.
    pub max_yaw: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 64.0,
            min_agents: 2,
            max_agents: 5,
            min_objects: 6,
            max_objects: 12,
            agent_spread: 8.0,
            min_agent_separation: 3.0,
            object_radius: 12.0,
            object_width: [1.6, 2.2],
            object_length: [3.8, 5.0],
            object_height: [0.8, 2.0],
            object_gap: 0.5,
            agent_clearance: 1.5,
            max_yaw: PI,
            max_attempts: 20_000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(format!("scene.{key}"), msg));
        if !(self.extent > 0.0) {
            return fail("extent", "must be positive");
        }
        if self.min_agents < 1 || self.min_agents > self.max_agents {
            return fail("min_agents", "agent count range must be nonempty and start at 1 or more");
        }
        if self.min_objects > self.max_objects {
            return fail("min_objects", "object count range is empty");
        }
        for (key, r) in [
            ("object_width", self.object_width),
            ("object_length", self.object_length),
            ("object_height", self.object_height),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return fail(key, "range must be positive and ordered");
            }
        }
        if self.max_attempts == 0 {
            return fail("max_attempts", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub rays: usize,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            rays: 360,
            max_range: 28.0,
        }
    }
}

/// BEV discretization around an observing agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Cells per side (the grid is square).
    pub size: usize,
    /// Height bands.
    pub channels: usize,
    /// Meters per cell.
    pub resolution: f64,
    /// Meters per height band.
    pub band_height: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 4,
            resolution: 0.5,
            band_height: 0.5,
        }
    }
}

impl GridConfig {
    pub fn half_extent(&self) -> f64 {
        0.5 * self.size as f64 * self.resolution
    }

    /// Cell `(row, col)` containing an ego-frame point, if inside the crop.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let n = self.size as f64;
        let c = (x / self.resolution + n / 2.0).floor();
        let r = (y / self.resolution + n / 2.0).floor();
        (c >= 0.0 && r >= 0.0 && c < n && r < n).then_some((r as usize, c as usize))
    }

    /// Ego-frame center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let n = self.size as f64;
        (
            (col as f64 + 0.5 - n / 2.0) * self.resolution,
            (row as f64 + 0.5 - n / 2.0) * self.resolution,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 4 != 0 {
            return Err(Error::config("grid.size", "must be a positive multiple of 4"));
        }
        if self.channels == 0 {
            return Err(Error::config("grid.channels", "must be positive"));
        }
        if !(self.resolution > 0.0) || !(self.band_height > 0.0) {
            return Err(Error::config("grid.resolution", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub rect: Rect,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub seed: u64,
    pub extent: f64,
    pub objects: Vec<SceneObject>,
    pub agents: Vec<Se2>,
}

fn sample_in_disk(rng: &mut ChaCha8Rng, cx: f64, cy: f64, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(-PI..PI);
    (cx + r * a.cos(), cy + r * a.sin())
}

/// Consecutive rejections of one object before the object layout restarts.
const RESTART_AFTER: usize = 500;

/// Deterministic scene for `seed`; the scene id equals the seed.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 * config.extent;
    let n_agents = rng.gen_range(config.min_agents..=config.max_agents);
    let n_objects = rng.gen_range(config.min_objects..=config.max_objects);
    let rotation = rng.gen_range(-PI..PI);
    let yaw = |rng: &mut ChaCha8Rng| {
        if config.max_yaw > 0.0 {
            rng.gen_range(-config.max_yaw..=config.max_yaw)
        } else {
            0.0
        }
    };

    let mut budget = config.max_attempts;
    let mut spend = |constraint: &'static str| -> Result<()> {
        if budget == 0 {
            return Err(Error::Generation { seed, constraint });
        }
        budget -= 1;
        Ok(())
    };

    let ego_x = rng.gen_range(-0.25 * half..=0.25 * half);
    let ego_y = rng.gen_range(-0.25 * half..=0.25 * half);
    let mut agents = vec![Se2::new(ego_x, ego_y, yaw(&mut rng))];
    while agents.len() < n_agents {
        spend("agent placement inside the world with minimum separation")?;
        let (x, y) = sample_in_disk(&mut rng, ego_x, ego_y, config.agent_spread);
        let heading = yaw(&mut rng);
        let inside = x.abs() < half && y.abs() < half;
        let separated = agents
            .iter()
            .all(|a| (a.x - x).hypot(a.y - y) >= config.min_agent_separation);
        if inside && separated {
            agents.push(Se2::new(x, y, heading));
        }
    }

    let (rs, rc) = rotation.sin_cos();
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    let mut misses = 0;
    while objects.len() < n_objects {
        spend("object non-overlap and agent clearance")?;
        // A jammed layout can leave no room for the next object; start over.
        if misses == RESTART_AFTER {
            objects.clear();
            misses = 0;
        }
        misses += 1;
        let (cx, cy) = sample_in_disk(&mut rng, ego_x, ego_y, config.object_radius);
        let w = rng.gen_range(config.object_width[0]..=config.object_width[1]);
        let l = rng.gen_range(config.object_length[0]..=config.object_length[1]);
        let height = rng.gen_range(config.object_height[0]..=config.object_height[1]);
        let rect = Rect::new(0.0, 0.0, w, l).rebox(|x, y| (rc * x - rs * y + cx, rs * x + rc * y + cy));
        let inside = rect.min_x() > -half && rect.max_x() < half && rect.min_y() > -half && rect.max_y() < half;
        let clear = agents
            .iter()
            .all(|a| rect.distance_to(a.x, a.y) >= config.agent_clearance);
        let free = objects
            .iter()
            .all(|o| !o.rect.overlaps(&rect, config.object_gap));
        if inside && clear && free {
            objects.push(SceneObject { rect, height });
            misses = 0;
        }
    }

    Ok(Scene {
        id: seed,
        seed,
        extent: config.extent,
        objects,
        agents,
    })
}

/// A range return: world-frame position, the height of the surface hit, and
/// the index of the object it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitPoint {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub object: usize,
}

/// Casts `rays` evenly spaced rays from the agent; each reports only its first
/// object intersection within range.
pub fn raycast_observe(scene: &Scene, agent: usize, config: &SensorConfig) -> Vec<HitPoint> {
    let pose = scene.agents[agent];
    let mut points = Vec::new();
    for r in 0..config.rays {
        let angle = pose.yaw + 2.0 * PI * r as f64 / config.rays as f64;
        let (dy, dx) = angle.sin_cos();
        let nearest = scene
            .objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.rect.ray_hit(pose.x, pose.y, dx, dy).map(|t| (t, i)))
            .filter(|&(t, _)| t <= config.max_range)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((t, i)) = nearest {
            points.push(HitPoint {
                x: pose.x + t * dx,
                y: pose.y + t * dy,
                height: scene.objects[i].height,
                object: i,
            });
        }
    }
    points
}

/// Objects returning at least one point to `agent`.
pub fn visible_objects(scene: &Scene, agent: usize, config: &SensorConfig) -> BTreeSet<usize> {
    raycast_observe(scene, agent, config)
        .into_iter()
        .map(|p| p.object)
        .collect()
}

/// Binary occupancy grid centered on the observing agent.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub occupancy: Tensor,
    pub resolution: f64,
}

impl BevGrid {
    pub fn empty(config: &GridConfig) -> Self {
        Self {
            occupancy: Tensor::zeros([config.size, config.size, config.channels]),
            resolution: config.resolution,
        }
    }

    /// Elementwise maximum with another grid of the same shape.
    pub fn max_with(&self, other: &BevGrid) -> BevGrid {
        let occupancy = self
            .occupancy
            .zip_map(&other.occupancy, f64::max)
            .expect("BEV grids share a shape");
        BevGrid {
            occupancy,
            resolution: self.resolution,
        }
    }
}

/// Number of height bands a surface of `height` meters occupies.
fn occupied_bands(height: f64, config: &GridConfig) -> usize {
    ((height / config.band_height).ceil() as usize).clamp(1, config.channels)
}

/// Bins world-frame points into the ego-centered grid; points outside the crop
/// are dropped and each occupied cell is set to 1.
pub fn voxelize(points: &[HitPoint], ego: &Se2, config: &GridConfig) -> BevGrid {
    let mut grid = BevGrid::empty(config);
    for p in points {
        let (ex, ey) = ego.apply_inverse(p.x, p.y);
        if let Some((r, c)) = config.cell_of(ex, ey) {
            for band in 0..occupied_bands(p.height, config) {
                grid.occupancy.set(&[r, c, band], 1.0);
            }
        }
    }
    grid
}

/// Per-cell detection targets in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    /// `[H, W]` foreground indicator.
    pub foreground: Tensor,
    /// `[H, W, 4]`: offset (dx, dy) from cell center to box center in meters,
    /// then `ln width`, `ln length`. Zero on background cells.
    pub regression: Tensor,
}

impl LabelGrid {
    pub fn foreground_count(&self) -> usize {
        self.foreground.data().iter().filter(|&&v| v > 0.5).count()
    }
}

/// Axis-aligned box of an object as seen from `ego`.
pub fn object_box_in_ego(object: &SceneObject, ego: &Se2) -> Rect {
    object.rect.rebox(|x, y| ego.apply_inverse(x, y))
}

pub fn make_labels(scene: &Scene, ego: &Se2, config: &GridConfig) -> LabelGrid {
    let n = config.size;
    let mut foreground = Tensor::zeros([n, n]);
    let mut regression = Tensor::zeros([n, n, 4]);
    let boxes: Vec<Rect> = scene
        .objects
        .iter()
        .map(|o| object_box_in_ego(o, ego))
        .collect();
    for r in 0..n {
        for c in 0..n {
            let (vx, vy) = config.cell_center(r, c);
            let (wx, wy) = ego.apply(vx, vy);
            if let Some(i) = scene.objects.iter().position(|o| o.rect.contains(wx, wy)) {
                let b = &boxes[i];
                foreground.set(&[r, c], 1.0);
                regression.set(&[r, c, 0], b.cx - vx);
                regression.set(&[r, c, 1], b.cy - vy);
                regression.set(&[r, c, 2], b.width.ln());
                regression.set(&[r, c, 3], b.length.ln());
            }
        }
    }
    LabelGrid {
        foreground,
        regression,
    }
}

/// Ground-truth boxes for evaluation at `ego`: objects whose center lies in
/// the ego crop.
pub fn ground_truth_boxes(scene: &Scene, ego: &Se2, config: &GridConfig) -> Vec<Rect> {
    let h = config.half_extent();
    scene
        .objects
        .iter()
        .map(|o| object_box_in_ego(o, ego))
        .filter(|b| b.cx.abs() < h && b.cy.abs() < h)
        .collect()
}

/// Everything an experiment needs from one scene, precomputed per agent.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub scene: Scene,
    pub bev: Vec<BevGrid>,
    pub labels: Vec<LabelGrid>,
    pub ground_truth: Vec<Vec<Rect>>,
    /// World-frame returns per agent.
    pub points: Vec<Vec<HitPoint>>,
}

impl SceneSample {
    pub fn build(scene: Scene, sensor: &SensorConfig, grid: &GridConfig) -> Self {
        let mut bev = Vec::new();
        let mut labels = Vec::new();
        let mut ground_truth = Vec::new();
        let mut points = Vec::new();
        for (i, pose) in scene.agents.iter().enumerate() {
            let pts = raycast_observe(&scene, i, sensor);
            bev.push(voxelize(&pts, pose, grid));
            labels.push(make_labels(&scene, pose, grid));
            ground_truth.push(ground_truth_boxes(&scene, pose, grid));
            points.push(pts);
        }
        Self {
            scene,
            bev,
            labels,
            ground_truth,
            points,
        }
    }

    pub fn agent_count(&self) -> usize {
        self.scene.agents.len()
    }

    /// True when some object in the ego crop is seen by another agent but not
    /// by the ego itself.
    pub fn has_hidden_object(&self, ego: usize, grid: &GridConfig) -> bool {
        let seen_by = |a: usize| -> BTreeSet<usize> { self.points[a].iter().map(|p| p.object).collect() };
        let ego_seen = seen_by(ego);
        let h = grid.half_extent();
        let pose = self.scene.agents[ego];
        (0..self.agent_count())
            .filter(|&a| a != ego)
            .flat_map(seen_by)
            .any(|o| {
                let b = object_box_in_ego(&self.scene.objects[o], &pose);
                !ego_seen.contains(&o) && b.cx.abs() < h && b.cy.abs() < h
            })
    }
}

pub fn write_scene_json(scene: &Scene, mut w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, scene)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_scene_json(r: impl Read) -> Result<Scene> {
    Ok(serde_json::from_reader(r)?)
}

/// BEV binary layout: `b"BEV"`, a dtype byte, then `H`, `W`, `C` as
/// little-endian `u32` (16 bytes total), followed by `H·W·C` payload values.
pub const BEV_MAGIC: &[u8; 3] = b"BEV";
pub const BEV_DTYPE_U8: u8 = 1;

pub fn write_bev(grid: &BevGrid, mut w: impl Write) -> Result<()> {
    let shape = grid.occupancy.shape();
    let mut header = [0u8; 16];
    header[..3].copy_from_slice(BEV_MAGIC);
    header[3] = BEV_DTYPE_U8;
    for (i, &d) in shape.iter().enumerate() {
        header[4 + 4 * i..8 + 4 * i].copy_from_slice(&(d as u32).to_le_bytes());
    }
    w.write_all(&header)?;
    let payload: Vec<u8> = grid.occupancy.data().iter().map(|&v| u8::from(v > 0.5)).collect();
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_bev(mut r: impl Read, resolution: f64) -> Result<BevGrid> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..3] != BEV_MAGIC {
        return Err(Error::Format("BEV file: bad magic".into()));
    }
    if header[3] != BEV_DTYPE_U8 {
        return Err(Error::Format(format!("BEV file: unsupported dtype code {}", header[3])));
    }
    let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let mut payload = vec![0u8; shape.iter().product()];
    r.read_exact(&mut payload)?;
    let occupancy = Tensor::new(shape, payload.into_iter().map(f64::from).collect())?;
    Ok(BevGrid {
        occupancy,
        resolution,
    })
}
