//! Collaboration baselines, average precision, bandwidth accounting and the
//! benchmark sweep.

use std::fmt;
use std::io::Write;

use autodiff::{nearest_warp, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::EgoPolicy;
use crate::error::{Error, Result};
use crate::geometry::{Rect, Se2};
use crate::params::{BoundParams, ParamSet};
use crate::perception::{
    detect, detection_order, nms, relative_voxel_transform, Architecture, DetectConfig, Detection,
    DetectionOutput, Net,
};
use crate::scene::{BevGrid, SceneSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollabMode {
    None,
    Early,
    Late,
    Intermediate,
}

impl CollabMode {
    pub const ALL: [CollabMode; 4] = [
        CollabMode::None,
        CollabMode::Early,
        CollabMode::Late,
        CollabMode::Intermediate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CollabMode::None => "none",
            CollabMode::Early => "early",
            CollabMode::Late => "late",
            CollabMode::Intermediate => "intermediate",
        }
    }
}

impl fmt::Display for CollabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One evaluated configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSetting {
    pub mode: CollabMode,
    /// Transmitted features are compressed by `1 / 2^n`.
    pub compression_exponent: u32,
    /// Standard deviation of sender position noise, meters.
    pub noise_std: f64,
}

impl EvalSetting {
    pub fn new(mode: CollabMode) -> Self {
        Self {
            mode,
            compression_exponent: 0,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.compression_exponent > 8 {
            return Err(Error::config("eval.compression_exponent", "must be in 0..=8"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::config("eval.noise_std", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Adds independent Gaussian noise of `std` meters to x and y.
pub fn inject_pose_noise(pose: &Se2, std: f64, rng: &mut impl Rng) -> Se2 {
    let zx: f64 = rng.sample(StandardNormal);
    let zy: f64 = rng.sample(StandardNormal);
    if std == 0.0 {
        return *pose;
    }
    Se2 {
        x: pose.x + std * zx,
        y: pose.y + std * zy,
        yaw: pose.yaw,
    }
}

/// Poses the ego uses for alignment. Each sender's noise comes from its own
/// stream keyed by (seed, scene, agent), so every noise level perturbs a
/// sender along the same direction and only the magnitude differs.
pub fn believed_poses(sample: &SceneSample, ego: usize, std: f64, seed: u64) -> Vec<Se2> {
    sample
        .scene
        .agents
        .iter()
        .enumerate()
        .map(|(j, pose)| {
            if j == ego {
                return *pose;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample.scene.id.rotate_left(21));
            rng.set_stream(j as u64);
            inject_pose_noise(pose, std, &mut rng)
        })
        .collect()
}

/// Every agent's raw grid warped into the ego frame with nearest-neighbor
/// sampling, merged by elementwise maximum.
pub fn aggregate_early_bev(sample: &SceneSample, ego: usize, poses: &[Se2]) -> BevGrid {
    let own = &sample.bev[ego];
    let shape = own.occupancy.shape().to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut merged = own.clone();
    for (j, grid) in sample.bev.iter().enumerate() {
        if j == ego {
            continue;
        }
        let t = relative_voxel_transform(&poses[j], &poses[ego], own.resolution);
        let data = nearest_warp(grid.occupancy.data(), h, w, c, &t);
        let warped = BevGrid {
            occupancy: Tensor::new(shape.clone(), data).expect("warp keeps the shape"),
            resolution: own.resolution,
        };
        merged = merged.max_with(&warped);
    }
    merged
}

/// Maps a box from `from`'s frame into `to`'s frame, re-boxing if rotated.
pub fn transfer_box(rect: &Rect, from: &Se2, to: &Se2) -> Rect {
    let rel = from.relative_to(to);
    rect.rebox(|x, y| rel.apply(x, y))
}

/// Inference with one trained model.
pub struct Pipeline<'a> {
    pub arch: &'a Architecture,
    pub params: &'a ParamSet,
    pub detect: &'a DetectConfig,
}

/// Result of intermediate collaboration, with the fusion weights for export.
pub struct CollabOutput {
    pub output: DetectionOutput,
    /// `(sender, [H, W, 1] weights)` in ascending sender order.
    pub weights: Vec<(usize, Tensor)>,
}

impl Pipeline<'_> {
    fn single(&self, bev: &BevGrid, agent: usize) -> Result<DetectionOutput> {
        let mut g = Graph::new();
        let bound = BoundParams::pipeline(self.params, &mut g);
        let net = Net::new(self.arch, &bound);
        let f = net.encode(&mut g, bev, agent)?;
        let heads = net.decode_and_head(&mut g, &f)?;
        Ok(detect(&g, &heads, &self.arch.grid, self.detect))
    }

    pub fn run_no_collab(&self, sample: &SceneSample, ego: usize) -> Result<DetectionOutput> {
        self.single(&sample.bev[ego], ego)
    }

    pub fn run_early_collab(&self, sample: &SceneSample, ego: usize, poses: &[Se2]) -> Result<DetectionOutput> {
        self.single(&aggregate_early_bev(sample, ego, poses), ego)
    }

    /// Each agent detects alone; boxes move to the ego frame and are merged
    /// by suppression. Heads are the ego's own.
    pub fn run_late_collab(&self, sample: &SceneSample, ego: usize, poses: &[Se2]) -> Result<DetectionOutput> {
        Ok(self.late_collab(sample, ego, poses)?.0)
    }

    /// Late collaboration plus the number of boxes the senders transmitted.
    fn late_collab(&self, sample: &SceneSample, ego: usize, poses: &[Se2]) -> Result<(DetectionOutput, usize)> {
        let mut own = self.run_no_collab(sample, ego)?;
        let mut pooled = own.boxes.clone();
        let mut sent = 0;
        for j in 0..sample.agent_count() {
            if j == ego {
                continue;
            }
            let out = self.run_no_collab(sample, j)?;
            sent += out.boxes.len();
            pooled.extend(out.boxes.iter().map(|d| Detection {
                rect: transfer_box(&d.rect, &poses[j], &poses[ego]),
                ..*d
            }));
        }
        own.boxes = nms(&pooled, self.detect.nms_iou);
        Ok((own, sent))
    }

    pub fn run_intermediate(&self, sample: &SceneSample, ego: usize, poses: &[Se2]) -> Result<CollabOutput> {
        let mut g = Graph::new();
        let bound = BoundParams::pipeline(self.params, &mut g);
        let net = Net::new(self.arch, &bound);
        let individual = (0..sample.agent_count())
            .map(|j| net.encode(&mut g, &sample.bev[j], j))
            .collect::<Result<Vec<_>>>()?;
        let views = net.aligned_views(&mut g, &individual, poses, ego)?;
        let fused = net.fuse(&mut g, &individual[ego], &views)?;
        let heads = net.decode_and_head(&mut g, &fused.feature)?;
        Ok(CollabOutput {
            output: detect(&g, &heads, &self.arch.grid, self.detect),
            weights: fused
                .weights
                .iter()
                .map(|&(j, w)| (j, g.value(w).clone()))
                .collect(),
        })
    }

    /// Detections for one ego under `mode`, plus the number of boxes senders
    /// transmitted (nonzero for late collaboration only).
    pub fn run(&self, mode: CollabMode, sample: &SceneSample, ego: usize, poses: &[Se2]) -> Result<(DetectionOutput, usize)> {
        Ok(match mode {
            CollabMode::None => (self.run_no_collab(sample, ego)?, 0),
            CollabMode::Early => (self.run_early_collab(sample, ego, poses)?, 0),
            CollabMode::Late => self.late_collab(sample, ego, poses)?,
            CollabMode::Intermediate => (self.run_intermediate(sample, ego, poses)?.output, 0),
        })
    }
}

/// All-point average precision over frames. Detections are matched in one
/// global pass ordered by [`detection_order`], each to the unmatched ground
/// truth box of its frame with the highest IoU at or above the threshold.
/// Frames without any ground truth contribute only false positives; with no
/// ground truth at all the result is 0.
pub fn compute_ap(detections: &[Vec<Detection>], ground_truth: &[Vec<Rect>], iou_threshold: f64) -> Result<f64> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::contract("compute_ap: IoU threshold must lie in (0, 1)"));
    }
    if detections.len() != ground_truth.len() {
        return Err(Error::contract("compute_ap: one ground-truth list per frame"));
    }
    let total_gt: usize = ground_truth.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Ok(0.0);
    }
    let mut pool: Vec<(usize, Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(f, ds)| ds.iter().map(move |d| (f, *d)))
        .collect();
    pool.sort_by(|a, b| detection_order(&a.1, &b.1).then(a.0.cmp(&b.0)));

    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(pool.len());
    for (k, (frame, d)) in pool.iter().enumerate() {
        let best = ground_truth[*frame]
            .iter()
            .enumerate()
            .filter(|(i, _)| !matched[*frame][*i])
            .map(|(i, gt)| (i, gt.iou(&d.rect)))
            .filter(|&(_, iou)| iou >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, _)) = best {
            matched[*frame][i] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    Ok(area_under_pr(&curve))
}

/// Area under the interpolated precision of `(recall, precision)` points
/// listed in rank order: each recall step is weighted by the best precision
/// reached at that recall or beyond.
pub(crate) fn area_under_pr(curve: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0; curve.len()];
    let mut best = 0.0_f64;
    for (k, &(_, p)) in curve.iter().enumerate().rev() {
        best = best.max(p);
        envelope[k] = best;
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        ap += (r - prev) * envelope[k];
        prev = r;
    }
    ap
}

/// Bytes to send `senders` feature maps of `dims` at ratio `1 / 2^n`.
pub fn comm_volume(dims: [usize; 3], bytes_per_value: usize, exponent: u32, senders: usize) -> Result<u64> {
    let denom = 1usize
        .checked_shl(exponent)
        .filter(|_| exponent < usize::BITS)
        .ok_or_else(|| Error::config("eval.compression_exponent", "ratio out of range"))?;
    let [h, w, c] = dims;
    if c % denom != 0 {
        return Err(Error::config(
            "eval.compression_exponent",
            format!("{c} channels are not divisible by {denom}"),
        ));
    }
    Ok((senders * h * w * (c / denom) * bytes_per_value) as u64)
}

/// Shapes used for bandwidth accounting, independent of the desk-scale
/// network that is actually run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandwidthConfig {
    pub feature_dims: [usize; 3],
    pub raw_dims: [usize; 3],
    pub bytes_per_value: usize,
    /// Values per transmitted box: center, size and score.
    pub box_values: usize,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        Self {
            feature_dims: [32, 32, 256],
            raw_dims: [256, 256, 13],
            bytes_per_value: 4,
            box_values: 5,
        }
    }
}

impl BandwidthConfig {
    /// Bytes the ego receives in one frame.
    pub fn frame_bytes(&self, setting: &EvalSetting, senders: usize, sender_boxes: usize) -> Result<u64> {
        Ok(match setting.mode {
            CollabMode::None => 0,
            CollabMode::Early => comm_volume(self.raw_dims, self.bytes_per_value, 0, senders)?,
            CollabMode::Late => (sender_boxes * self.box_values * self.bytes_per_value) as u64,
            CollabMode::Intermediate => comm_volume(
                self.feature_dims,
                self.bytes_per_value,
                setting.compression_exponent,
                senders,
            )?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub detect: DetectConfig,
    pub bandwidth: BandwidthConfig,
    pub egos: EgoPolicy,
    /// Keys the pose-noise streams.
    pub noise_seed: u64,
    pub modes: Vec<CollabMode>,
    pub noise_stds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            detect: DetectConfig::default(),
            bandwidth: BandwidthConfig::default(),
            egos: EgoPolicy::Designated,
            noise_seed: 7,
            modes: CollabMode::ALL.to_vec(),
            noise_stds: vec![0.0, 0.2, 0.4],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.detect;
        if !(d.nms_iou > 0.0 && d.nms_iou < 1.0) {
            return Err(Error::config("eval.detect.nms_iou", "must lie in (0, 1)"));
        }
        if !d.score_threshold.is_finite() {
            return Err(Error::config("eval.detect.score_threshold", "must be finite"));
        }
        if self.bandwidth.bytes_per_value == 0 {
            return Err(Error::config("eval.bandwidth.bytes_per_value", "must be positive"));
        }
        if self.modes.is_empty() {
            return Err(Error::config("eval.modes", "must list at least one mode"));
        }
        if let Some(s) = self.noise_stds.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::config("eval.noise_stds", format!("invalid standard deviation {s}")));
        }
        Ok(())
    }
}

/// Metrics of one (setting, seed) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub setting: EvalSetting,
    pub seed: u64,
    pub ap50: f64,
    pub ap70: f64,
    /// Mean bytes received per evaluated ego frame.
    pub comm_bytes: u64,
}

/// Row of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: String,
    pub ratio_denominator: u64,
    pub noise_std: f64,
    pub seed: u64,
    pub ap50: f64,
    pub ap70: f64,
    pub comm_bytes: u64,
}

impl From<&EvalReport> for SweepRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            mode: r.label.clone(),
            ratio_denominator: 1 << r.setting.compression_exponent,
            noise_std: r.setting.noise_std,
            seed: r.seed,
            ap50: r.ap50,
            ap70: r.ap70,
            comm_bytes: r.comm_bytes,
        }
    }
}

pub fn write_sweep_csv(reports: &[EvalReport], w: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in reports {
        csv.serialize(SweepRow::from(r))
            .map_err(|e| Error::Format(format!("sweep table: {e}")))?;
    }
    csv.flush()?;
    Ok(())
}

/// A model to evaluate: `params` is `None` when its checkpoint is missing.
pub struct BenchmarkEntry<'a> {
    pub label: String,
    pub setting: EvalSetting,
    pub seed: u64,
    pub arch: &'a Architecture,
    pub params: Option<&'a ParamSet>,
}

/// Evaluates one entry over every ego frame of `test`.
pub fn evaluate(entry: &BenchmarkEntry<'_>, test: &[SceneSample], config: &EvalConfig) -> Result<EvalReport> {
    entry.setting.validate()?;
    let params = entry.params.ok_or_else(|| Error::Missing {
        what: format!("checkpoint for mode `{}` (seed {})", entry.label, entry.seed),
        path: std::path::PathBuf::new(),
    })?;
    if test.is_empty() {
        return Err(Error::contract("benchmark: at least one test scene is required"));
    }
    let pipeline = Pipeline {
        arch: entry.arch,
        params,
        detect: &config.detect,
    };
    let mut detections = Vec::new();
    let mut truth = Vec::new();
    let mut bytes = 0u64;
    for sample in test {
        for ego in config.egos.egos(sample.agent_count()) {
            let poses = believed_poses(sample, ego, entry.setting.noise_std, config.noise_seed);
            let (out, sender_boxes) = pipeline.run(entry.setting.mode, sample, ego, &poses)?;
            let senders = sample.agent_count() - 1;
            bytes += config.bandwidth.frame_bytes(&entry.setting, senders, sender_boxes)?;
            detections.push(out.boxes);
            truth.push(sample.ground_truth[ego].clone());
        }
    }
    let frames = detections.len() as u64;
    Ok(EvalReport {
        label: entry.label.clone(),
        setting: entry.setting,
        seed: entry.seed,
        ap50: compute_ap(&detections, &truth, 0.5)?,
        ap70: compute_ap(&detections, &truth, 0.7)?,
        comm_bytes: bytes / frames.max(1),
    })
}

/// Evaluates every entry in order.
pub fn run_benchmark(entries: &[BenchmarkEntry<'_>], test: &[SceneSample], config: &EvalConfig) -> Result<Vec<EvalReport>> {
    if test.is_empty() {
        return Err(Error::contract("benchmark: at least one test scene is required"));
    }
    entries.iter().map(|e| evaluate(e, test, config)).collect()
}
