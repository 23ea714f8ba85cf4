//! Contrastive multi-view mutual information: pair construction, the global
//! and local discriminators, and the Jensen-Shannon estimator.

use std::collections::{BTreeMap, BTreeSet};

use autodiff::{Graph, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Initializer, ParamSet};
use crate::perception::{Architecture, FeatureMap, Net};

/// Adds the projection `ω`, the global head and the local 1×1 stack.
pub(crate) fn init_discriminators(arch: &Architecture, init: &mut Initializer, set: &mut ParamSet) {
    let [h, w, c] = arch.feature_shape();
    let net = &arch.net;
    let flat = h * w * c;
    let d = net.projection_dim;
    init.linear(set, "mi.proj", flat, d, 1.0);
    init.linear(set, "mi.global.fc1", flat + d, net.global_hidden, 1.0);
    init.linear(set, "mi.global.fc2", net.global_hidden, net.global_hidden, 1.0);
    init.linear(set, "mi.global.fc3", net.global_hidden, 1, 0.5);
    init.conv(set, "mi.local.conv1", 1, c + d, net.local_hidden, 1.0);
    init.conv(set, "mi.local.conv2", 1, net.local_hidden, 1, 0.5);
}

/// Mean of `-softplus(-t)` over positives minus mean of `softplus(t)` over
/// negatives, in nats.
pub fn estimate_js_mi(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract("estimate_js_mi: empty score list"));
    }
    let sp = autodiff::softplus;
    let p = pos.iter().map(|&t| -sp(-t)).sum::<f64>() / pos.len() as f64;
    let n = neg.iter().map(|&t| sp(t)).sum::<f64>() / neg.len() as f64;
    Ok(p - n)
}

/// Local estimate from `[H, W]` score maps: the per-voxel estimate averaged
/// over positions, computed on the flattened maps.
pub fn estimate_local_mi(pos: &autodiff::Tensor, neg: &autodiff::Tensor) -> Result<f64> {
    if pos.shape() != neg.shape() {
        return Err(Error::contract(format!(
            "estimate_local_mi: score maps {:?} and {:?} differ",
            pos.shape(),
            neg.shape()
        )));
    }
    estimate_js_mi(pos.data(), neg.data())
}

/// Graph form of [`estimate_js_mi`] over two score vectors.
pub fn js_mi(g: &mut Graph, pos: Var, neg: Var) -> Result<Var> {
    let np = g.neg(pos);
    let sp = g.softplus(np);
    let p = g.mean(sp)?;
    let sn = g.softplus(neg);
    let n = g.mean(sn)?;
    let p = g.neg(p);
    Ok(g.sub(p, n)?)
}

impl Net<'_> {
    /// `ω(F')`: flattened collaborative view through one linear layer.
    pub fn project(&self, g: &mut Graph, collab: &FeatureMap) -> Result<Var> {
        let x = g.flatten(collab.var)?;
        let w = self.params.var("mi.proj.w")?;
        let b = self.params.var("mi.proj.b")?;
        Ok(g.linear(x, w, b)?)
    }

    fn dense(&self, g: &mut Graph, x: Var, layer: &str, relu: bool) -> Result<Var> {
        let w = self.params.var(&format!("{layer}.w"))?;
        let b = self.params.var(&format!("{layer}.b"))?;
        let y = g.linear(x, w, b)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    /// Scalar score `[1]` of an individual view against a projected
    /// collaborative view.
    pub fn score_global(&self, g: &mut Graph, individual: &FeatureMap, projection: Var) -> Result<Var> {
        let f = g.flatten(individual.var)?;
        let x = g.concat(&[f, projection])?;
        self.global_head(g, x)
    }

    /// Global MLP over `[n]` or `[pairs, n]` inputs.
    fn global_head(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x = self.dense(g, x, "mi.global.fc1", true)?;
        let x = self.dense(g, x, "mi.global.fc2", true)?;
        self.dense(g, x, "mi.global.fc3", false)
    }

    /// Local 1×1 stack; position-wise, so stacked pairs score independently.
    fn local_head(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x = self.conv(g, x, "mi.local.conv1", 1, true)?;
        self.conv(g, x, "mi.local.conv2", 1, false)
    }

    /// `[H, W]` score map: the projection is tiled over every voxel and
    /// joined with that voxel's channel vector.
    pub fn score_local(&self, g: &mut Graph, individual: &FeatureMap, projection: Var) -> Result<Var> {
        let shape = g.shape(individual.var).to_vec();
        if shape.len() != 3 {
            return Err(autodiff::TensorError::Shape {
                op: "score_local",
                expected: vec![0, 0, 0],
                got: shape,
            }
            .into());
        }
        let (h, w) = (shape[0], shape[1]);
        let d = g.shape(projection)[0];
        let tiled = g.tile(projection, h * w)?;
        let tiled = g.reshape(tiled, &[h, w, d])?;
        let x = g.concat(&[individual.var, tiled])?;
        let x = self.local_head(g, x)?;
        Ok(g.reshape(x, &[h, w])?)
    }
}

/// Views of one scene seen from a fixed ego index.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneViews<V> {
    pub scene_id: u64,
    /// Aligned individual views in ascending sender order.
    pub aligned: Vec<V>,
    /// The ego's collaborative view; only scenes on the positive side need one.
    pub collab: Option<V>,
}

/// One (individual view, collaborative view) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair<V> {
    pub individual: V,
    pub collab: V,
    /// Scene and sender index of the individual view.
    pub individual_scene: u64,
    pub sender: usize,
    /// Scene of the collaborative view; positives and negatives of the same
    /// scene and sender slot share this.
    pub scene: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch<V> {
    pub ego: usize,
    pub positives: Vec<Pair<V>>,
    pub negatives: Vec<Pair<V>>,
    pub scenes: Vec<u64>,
    pub negative_scenes: Vec<u64>,
}

/// Pairs every sender of every batch scene with its own collaborative view
/// (positive) and with the same sender slot of a disjoint scene (negative).
/// Scenes are ordered by id first, so the result depends only on the sets
/// and `seed`. A negative scene with fewer agents is indexed cyclically.
pub fn sample_pairs<V: Clone>(
    batch: &[SceneViews<V>],
    negatives: &[SceneViews<V>],
    ego: usize,
    seed: u64,
) -> Result<PairBatch<V>> {
    if batch.is_empty() || negatives.is_empty() {
        return Err(Error::contract("sample_pairs: empty scene list"));
    }
    let ids: BTreeSet<u64> = batch.iter().map(|s| s.scene_id).collect();
    let neg_ids: BTreeSet<u64> = negatives.iter().map(|s| s.scene_id).collect();
    if ids.len() != batch.len() || neg_ids.len() != negatives.len() {
        return Err(Error::contract("sample_pairs: duplicate scene id"));
    }
    if let Some(shared) = ids.intersection(&neg_ids).next() {
        return Err(Error::contract(format!(
            "sample_pairs: scene {shared} appears in both positive and negative sets"
        )));
    }
    if let Some(s) = batch.iter().chain(negatives).find(|s| s.aligned.is_empty()) {
        return Err(Error::contract(format!("sample_pairs: scene {} has no views", s.scene_id)));
    }
    if let Some(s) = batch.iter().find(|s| s.collab.is_none()) {
        return Err(Error::contract(format!(
            "sample_pairs: scene {} lacks a collaborative view",
            s.scene_id
        )));
    }
    let mut pos_scenes: Vec<&SceneViews<V>> = batch.iter().collect();
    pos_scenes.sort_by_key(|s| s.scene_id);
    let mut neg_scenes: Vec<&SceneViews<V>> = negatives.iter().collect();
    neg_scenes.sort_by_key(|s| s.scene_id);
    let mut order: Vec<usize> = (0..neg_scenes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = PairBatch {
        ego,
        positives: Vec::new(),
        negatives: Vec::new(),
        scenes: pos_scenes.iter().map(|s| s.scene_id).collect(),
        negative_scenes: neg_scenes.iter().map(|s| s.scene_id).collect(),
    };
    for (b, scene) in pos_scenes.iter().enumerate() {
        let other = neg_scenes[order[b % order.len()]];
        let collab = scene.collab.clone().expect("checked above");
        for (j, view) in scene.aligned.iter().enumerate() {
            out.positives.push(Pair {
                individual: view.clone(),
                collab: collab.clone(),
                individual_scene: scene.scene_id,
                sender: j,
                scene: scene.scene_id,
            });
            out.negatives.push(Pair {
                individual: other.aligned[j % other.aligned.len()].clone(),
                collab: collab.clone(),
                individual_scene: other.scene_id,
                sender: j,
                scene: scene.scene_id,
            });
        }
    }
    Ok(out)
}

/// Per-scene averaging weights: each (scene, sender) pair gets
/// `1 / (scenes · senders_in_scene)`, so the weighted sum equals the
/// per-scene mean over senders averaged over scenes.
pub fn pair_weights<V>(pairs: &[Pair<V>]) -> Vec<f64> {
    let mut per_scene: BTreeMap<u64, usize> = BTreeMap::new();
    for p in pairs {
        *per_scene.entry(p.scene).or_default() += 1;
    }
    let scenes = per_scene.len() as f64;
    pairs
        .iter()
        .map(|p| 1.0 / (scenes * per_scene[&p.scene] as f64))
        .collect()
}

/// MI losses of one pair batch on the graph.
#[derive(Debug, Clone, Copy)]
pub struct MiLosses {
    /// `-(1/N) Σ_j Î_G`, averaged over scenes.
    pub global: Var,
    /// `-(1/N) Σ_j Î_L`, averaged over scenes.
    pub local: Var,
}

impl Net<'_> {
    /// Builds `L_GMI` and `L_LMI` for a batch of feature-map pairs. Each
    /// (scene, sender) term is the estimator on its single positive and
    /// single negative pair. All pairs are scored in one batched pass: the
    /// global head takes a `[pairs, n]` matrix and the 1×1 local stack runs
    /// over the score inputs stacked into one tall grid.
    pub fn mvmi_losses(&self, g: &mut Graph, batch: &PairBatch<FeatureMap>) -> Result<MiLosses> {
        if batch.positives.len() != batch.negatives.len() || batch.positives.is_empty() {
            return Err(Error::contract("mvmi: positives and negatives must pair up"));
        }
        let mut projections: BTreeMap<usize, (Var, Var)> = BTreeMap::new();
        let pairs: Vec<&Pair<FeatureMap>> = batch.positives.iter().chain(&batch.negatives).collect();
        let mut global_rows = Vec::with_capacity(pairs.len());
        let mut local_features = Vec::with_capacity(pairs.len());
        let mut local_tiles = Vec::with_capacity(pairs.len());
        let [h, w, c] = self.arch.feature_shape();
        for p in &pairs {
            if g.shape(p.individual.var) != [h, w, c] {
                return Err(autodiff::TensorError::Shape {
                    op: "mvmi_losses",
                    expected: vec![h, w, c],
                    got: g.shape(p.individual.var).to_vec(),
                }
                .into());
            }
            let (proj, tiled) = match projections.get(&p.collab.var.id()) {
                Some(&v) => v,
                None => {
                    let proj = self.project(g, &p.collab)?;
                    let tiled = g.tile(proj, h * w)?;
                    let tiled = g.flatten(tiled)?;
                    projections.insert(p.collab.var.id(), (proj, tiled));
                    (proj, tiled)
                }
            };
            let f = g.flatten(p.individual.var)?;
            global_rows.push(g.concat(&[f, proj])?);
            local_features.push(f);
            local_tiles.push(tiled);
        }
        let k = pairs.len();
        let d = self.arch.net.projection_dim;

        let rows = g.concat(&global_rows)?;
        let x = g.reshape(rows, &[k, h * w * c + d])?;
        let global = self.global_head(g, x)?;
        let global = g.flatten(global)?;

        let feats = g.concat(&local_features)?;
        let feats = g.reshape(feats, &[k * h, w, c])?;
        let tiles = g.concat(&local_tiles)?;
        let tiles = g.reshape(tiles, &[k * h, w, d])?;
        let x = g.concat(&[feats, tiles])?;
        let local = self.local_head(g, x)?;
        let local = g.flatten(local)?;

        let weights = pair_weights(&batch.positives);
        let global = js_loss(g, global, &weights, 1)?;
        let local = js_loss(g, local, &weights, h * w)?;
        Ok(MiLosses { global, local })
    }
}

/// `Σ_p w_p · (mean softplus(-pos_p) + mean softplus(neg_p))`, i.e. the
/// weighted negated estimator, for scores laid out as all positive pairs
/// followed by all negative pairs with `per_pair` scores each.
fn js_loss(g: &mut Graph, scores: Var, weights: &[f64], per_pair: usize) -> Result<Var> {
    let pairs = weights.len();
    let sign = autodiff::Tensor::from_fn([2 * pairs * per_pair], |i| if i < pairs * per_pair { -1.0 } else { 1.0 });
    let wts: Vec<f64> = weights
        .iter()
        .chain(weights)
        .flat_map(|&w| std::iter::repeat(w / per_pair as f64).take(per_pair))
        .collect();
    let sign = g.constant(sign);
    let signed = g.mul(scores, sign)?;
    let sp = g.softplus(signed);
    Ok(g.weighted_sum(sp, &wts)?)
}
