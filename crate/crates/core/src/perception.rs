//! Encoder, pose alignment, per-voxel fusion, decoder and detection heads.

use autodiff::{Graph, Padding, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rect, Se2};
use crate::params::{BoundParams, Initializer, ParamSet};
use crate::scene::{BevGrid, GridConfig};

/// Layer widths of the perception pipeline and the discriminators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Encoder widths: first block, then the feature channel count `C`.
    pub encoder_channels: [usize; 2],
    pub collab_hidden: usize,
    pub decoder_channels: usize,
    /// Length `d` of the projected collaborative view.
    pub projection_dim: usize,
    pub global_hidden: usize,
    pub local_hidden: usize,
    /// Transmitted features carry `C / 2^n` channels.
    pub compression_exponent: u32,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [16, 32],
            collab_hidden: 32,
            decoder_channels: 32,
            projection_dim: 64,
            global_hidden: 128,
            local_hidden: 64,
            compression_exponent: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("net.encoder_channels", self.encoder_channels[0].min(self.encoder_channels[1])),
            ("net.collab_hidden", self.collab_hidden),
            ("net.decoder_channels", self.decoder_channels),
            ("net.projection_dim", self.projection_dim),
            ("net.global_hidden", self.global_hidden),
            ("net.local_hidden", self.local_hidden),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.compression_exponent > 8 {
            return Err(Error::config("net.compression_exponent", "must be in 0..=8"));
        }
        transmitted_channels(self.encoder_channels[1], self.compression_exponent)
            .map_err(|e| Error::config("net.compression_exponent", e.to_string()))?;
        Ok(())
    }
}

/// Channels sent over the link at ratio `1/2^n`. Denominators at or above
/// `C` leave a single channel.
pub fn transmitted_channels(channels: usize, exponent: u32) -> Result<usize> {
    let denom = 1usize << exponent;
    if denom >= channels {
        return Ok(1);
    }
    if channels % denom != 0 {
        return Err(Error::contract(format!(
            "{channels} channels are not divisible by compression denominator {denom}"
        )));
    }
    Ok(channels / denom)
}

/// Static shapes shared by every graph built for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub net: NetConfig,
    pub grid: GridConfig,
}

impl Architecture {
    pub fn new(net: NetConfig, grid: GridConfig) -> Result<Self> {
        net.validate()?;
        grid.validate()?;
        Ok(Self { net, grid })
    }

    pub fn feature_size(&self) -> usize {
        self.grid.size / 2
    }

    pub fn feature_channels(&self) -> usize {
        self.net.encoder_channels[1]
    }

    /// `[H, W, C]` of an individual view.
    pub fn feature_shape(&self) -> [usize; 3] {
        let n = self.feature_size();
        [n, n, self.feature_channels()]
    }

    /// Meters per feature voxel.
    pub fn feature_resolution(&self) -> f64 {
        self.grid.resolution * 2.0
    }

    /// Fresh parameters for the pipeline and both discriminators.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut init = Initializer::new(seed);
        let mut set = ParamSet::new();
        let net = &self.net;
        let [c1, c] = net.encoder_channels;
        init.conv(&mut set, "enc.conv1", 3, self.grid.channels, c1, 1.0);
        init.conv(&mut set, "enc.conv2", 3, c1, c, 1.0);
        init.conv(&mut set, "enc.conv3", 3, c, c, 1.0);
        init.conv(&mut set, "col.conv1", 1, 2 * c, net.collab_hidden, 1.0);
        init.conv(&mut set, "col.conv2", 1, net.collab_hidden, 1, 0.5);
        if net.compression_exponent > 0 {
            let t = transmitted_channels(c, net.compression_exponent)?;
            init.conv(&mut set, "comp.down", 1, c, t, 0.7);
            init.conv(&mut set, "comp.up", 1, t, c, 0.7);
        }
        let d = net.decoder_channels;
        init.conv(&mut set, "dec.conv1", 3, c, d, 1.0);
        init.conv(&mut set, "dec.conv2", 3, d, d, 1.0);
        init.conv(&mut set, "head.cls", 1, d, 1, 0.5);
        init.conv(&mut set, "head.reg", 1, d, 4, 0.5);
        crate::mvmi::init_discriminators(self, &mut init, &mut set);
        Ok(set)
    }
}

/// Which stage of the pipeline produced a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewOrigin {
    Individual,
    Aligned,
    Collaborative,
}

/// An `[H, W, C]` feature grid on a graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureMap {
    pub var: Var,
    /// Agent whose frame the spatial axes follow.
    pub frame: usize,
    /// Agent that observed the content (the ego for fused views).
    pub source: usize,
    pub origin: ViewOrigin,
}

/// Output of [`Net::fuse`].
#[derive(Debug, Clone)]
pub struct Fused {
    pub feature: FeatureMap,
    /// Normalized `[H, W, 1]` weight maps, one per sender in ascending id order.
    pub weights: Vec<(usize, Var)>,
}

/// Pre-NMS head outputs at label resolution.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    /// `[H, W]` classification logits.
    pub cls_logits: Var,
    /// `[H, W]` foreground probability.
    pub cls: Var,
    /// `[H, W, 4]` box regression.
    pub reg: Var,
}

/// Parameters of one model bound onto a graph.
pub struct Net<'a> {
    pub arch: &'a Architecture,
    pub params: &'a BoundParams,
}

impl<'a> Net<'a> {
    pub fn new(arch: &'a Architecture, params: &'a BoundParams) -> Self {
        Self { arch, params }
    }

    pub(crate) fn conv(&self, g: &mut Graph, x: Var, layer: &str, stride: usize, relu: bool) -> Result<Var> {
        let w = self.params.var(&format!("{layer}.w"))?;
        let b = self.params.var(&format!("{layer}.b"))?;
        let y = g.conv2d(x, w, stride, Padding::Same)?;
        let y = g.channel_bias(y, b)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    /// Individual view of `agent` from its own BEV grid.
    pub fn encode(&self, g: &mut Graph, bev: &BevGrid, agent: usize) -> Result<FeatureMap> {
        let grid = &self.arch.grid;
        let expected = [grid.size, grid.size, grid.channels];
        if bev.occupancy.shape() != expected {
            return Err(autodiff::TensorError::Shape {
                op: "encode",
                expected: expected.to_vec(),
                got: bev.occupancy.shape().to_vec(),
            }
            .into());
        }
        let x = g.constant(bev.occupancy.clone());
        let x = self.conv(g, x, "enc.conv1", 1, true)?;
        let x = self.conv(g, x, "enc.conv2", 2, true)?;
        let x = self.conv(g, x, "enc.conv3", 1, true)?;
        Ok(FeatureMap {
            var: x,
            frame: agent,
            source: agent,
            origin: ViewOrigin::Individual,
        })
    }

    /// Sender-side compression and receiver-side reconstruction. A bypass at
    /// ratio 1.
    pub fn transmit(&self, g: &mut Graph, feature: FeatureMap) -> Result<FeatureMap> {
        if self.arch.net.compression_exponent == 0 {
            return Ok(feature);
        }
        let z = self.conv(g, feature.var, "comp.down", 1, false)?;
        let var = self.conv(g, z, "comp.up", 1, false)?;
        Ok(FeatureMap { var, ..feature })
    }

    /// Every agent's view in `ego`'s frame, ordered by agent. Senders other
    /// than the ego pass through [`Net::transmit`]; `poses` are the poses the
    /// ego believes, possibly noisy.
    pub fn aligned_views(
        &self,
        g: &mut Graph,
        individual: &[FeatureMap],
        poses: &[Se2],
        ego: usize,
    ) -> Result<Vec<FeatureMap>> {
        if individual.len() != poses.len() || ego >= poses.len() {
            return Err(Error::contract("aligned_views: one pose per view and a valid ego"));
        }
        let res = self.arch.feature_resolution();
        individual
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let sent = if j == ego { *f } else { self.transmit(g, *f)? };
                warp_to_ego(g, &sent, &poses[j], &poses[ego], ego, res)
            })
            .collect()
    }

    /// Unnormalized `[H, W, 1]` importance logits of `aligned` for `ego`.
    pub fn collab_logits(&self, g: &mut Graph, aligned: &FeatureMap, ego: &FeatureMap) -> Result<Var> {
        let x = g.concat(&[aligned.var, ego.var])?;
        let x = self.conv(g, x, "col.conv1", 1, true)?;
        self.conv(g, x, "col.conv2", 1, false)
    }

    /// Per-voxel softmax over senders, then the weighted sum of views. Views
    /// are summed in ascending source order, so their input order is
    /// irrelevant.
    pub fn fuse(&self, g: &mut Graph, ego: &FeatureMap, views: &[FeatureMap]) -> Result<Fused> {
        if views.is_empty() {
            return Err(Error::contract("fuse: no views"));
        }
        let mut views = views.to_vec();
        views.sort_by_key(|v| v.source);
        let logits = views
            .iter()
            .map(|v| self.collab_logits(g, v, ego))
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat(&logits)?;
        let soft = g.softmax_last(stacked)?;
        let mut weights = Vec::with_capacity(views.len());
        let mut terms = Vec::with_capacity(views.len());
        for (j, v) in views.iter().enumerate() {
            let w = g.slice_last(soft, j, 1)?;
            terms.push(g.mul_channels(v.var, w)?);
            weights.push((v.source, w));
        }
        let var = g.add_n(&terms)?;
        Ok(Fused {
            feature: FeatureMap {
                var,
                frame: ego.frame,
                source: ego.frame,
                origin: ViewOrigin::Collaborative,
            },
            weights,
        })
    }

    /// Decoder to label resolution followed by the two 1×1 heads.
    pub fn decode_and_head(&self, g: &mut Graph, feature: &FeatureMap) -> Result<Heads> {
        let x = self.conv(g, feature.var, "dec.conv1", 1, true)?;
        let x = g.upsample2x(x)?;
        let x = self.conv(g, x, "dec.conv2", 1, true)?;
        let logits = self.conv(g, x, "head.cls", 1, false)?;
        let n = self.arch.grid.size;
        let cls_logits = g.reshape(logits, &[n, n])?;
        let cls = g.sigmoid(cls_logits);
        let reg = self.conv(g, x, "head.reg", 1, false)?;
        Ok(Heads {
            cls_logits,
            cls,
            reg,
        })
    }
}

/// Relative motion that carries `sender`-frame content into `ego`'s frame,
/// in feature voxel units.
pub fn relative_voxel_transform(sender: &Se2, ego: &Se2, resolution: f64) -> autodiff::Rigid2 {
    if sender == ego {
        return autodiff::Rigid2::IDENTITY;
    }
    sender.relative_to(ego).to_voxel_transform(resolution)
}

/// Aligns an individual view with the ego frame.
pub fn warp_to_ego(
    g: &mut Graph,
    feature: &FeatureMap,
    sender_pose: &Se2,
    ego_pose: &Se2,
    ego: usize,
    resolution: f64,
) -> Result<FeatureMap> {
    if feature.origin != ViewOrigin::Individual {
        return Err(Error::contract("warp_to_ego: expected an individual view"));
    }
    let t = relative_voxel_transform(sender_pose, ego_pose, resolution);
    let var = g.bilinear_warp(feature.var, &t)?;
    Ok(FeatureMap {
        var,
        frame: ego,
        source: feature.source,
        origin: ViewOrigin::Aligned,
    })
}

/// Box decoding and suppression thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            nms_iou: 0.1,
        }
    }
}

/// A scored box in some agent's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub rect: Rect,
    pub score: f64,
    /// Label-grid cell the box was decoded from.
    pub cell: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct DetectionOutput {
    pub cls: Tensor,
    pub reg: Tensor,
    pub boxes: Vec<Detection>,
}

const LOG_SIZE_LIMIT: f64 = 8.0;

/// Boxes at every cell with `cls >= threshold`, before suppression.
pub fn decode_boxes(cls: &Tensor, reg: &Tensor, grid: &GridConfig, threshold: f64) -> Vec<Detection> {
    let n = grid.size;
    let mut out = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let score = cls.at(&[r, c]);
            if score < threshold {
                continue;
            }
            let (vx, vy) = grid.cell_center(r, c);
            let size = |k: usize| reg.at(&[r, c, k]).clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp();
            out.push(Detection {
                rect: Rect::new(vx + reg.at(&[r, c, 0]), vy + reg.at(&[r, c, 1]), size(2), size(3)),
                score,
                cell: (r, c),
            });
        }
    }
    out
}

/// Descending score, ties broken by lexicographic box coordinates.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        let key = |d: &Detection| [d.rect.cx, d.rect.cy, d.rect.width, d.rect.length];
        let (ka, kb) = (key(a), key(b));
        ka.iter()
            .zip(kb.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Greedy suppression: a box survives unless it overlaps a higher-ranked
/// survivor with IoU above `iou_threshold`.
pub fn nms(boxes: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| k.rect.iou(&d.rect) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Reads head values off the graph and decodes suppressed boxes.
pub fn detect(g: &Graph, heads: &Heads, grid: &GridConfig, config: &DetectConfig) -> DetectionOutput {
    let cls = g.value(heads.cls).clone();
    let reg = g.value(heads.reg).clone();
    let boxes = nms(&decode_boxes(&cls, &reg, grid, config.score_threshold), config.nms_iou);
    DetectionOutput { cls, reg, boxes }
}

/// Writes an `[H, W]` or `[H, W, 1]` map as CSV, one grid row per line.
pub fn write_heatmap_csv(map: &Tensor, mut w: impl std::io::Write) -> Result<()> {
    let shape = map.shape();
    let ok = shape.len() == 2 || (shape.len() == 3 && shape[2] == 1);
    if !ok {
        return Err(Error::contract(format!("heatmap: expected [H, W] or [H, W, 1], got {shape:?}")));
    }
    let width = shape[1];
    for row in map.data().chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}
