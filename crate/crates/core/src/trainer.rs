//! Joint optimization of the perception pipeline and the discriminators.

use std::collections::BTreeMap;
use std::time::Instant;

use autodiff::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EgoPolicy;
use crate::error::{Error, Result};
use crate::eval::aggregate_early_bev;
use crate::mvmi::{sample_pairs, SceneViews};
use crate::params::{BoundParams, ParamGroup, ParamSet};
use crate::perception::{Architecture, FeatureMap, Heads, Net};
use crate::scene::{BevGrid, LabelGrid, SceneSample};

/// Weights of the overall objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Share of the MI term in the total; `1 - alpha` goes to detection.
    pub alpha: f64,
    /// Rescales the MI loss.
    pub lambda: f64,
    pub beta_global: f64,
    pub beta_local: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            lambda: 0.1,
            beta_global: 0.5,
            beta_local: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("loss.alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("loss.lambda", "must be positive"));
        }
        for (path, b) in [("loss.beta_global", self.beta_global), ("loss.beta_local", self.beta_local)] {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::config(path, "must be nonnegative"));
            }
        }
        if self.alpha > 0.0 && self.beta_global + self.beta_local <= 0.0 {
            return Err(Error::config("loss.beta_global", "beta_global + beta_local must be positive when alpha > 0"));
        }
        Ok(())
    }

    fn uses_mi(&self) -> bool {
        self.alpha > 0.0
    }
}

/// Adam learning rates and the step decay schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_pipeline: f64,
    pub lr_discriminator: f64,
    /// Decay points as fractions of the epoch count.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_pipeline: 1e-3,
            lr_discriminator: 1e-4,
            milestones: vec![0.6, 0.8],
            gamma: 0.5,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (path, lr) in [("optim.lr_pipeline", self.lr_pipeline), ("optim.lr_discriminator", self.lr_discriminator)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("optim.milestones", "must be strictly increasing"));
        }
        if self.milestones.iter().any(|m| !(*m > 0.0 && *m <= 1.0)) {
            return Err(Error::config("optim.milestones", "fractions must lie in (0, 1]"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("optim.gamma", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Milestone epochs for a run of `epochs` epochs.
    pub fn milestone_epochs(&self, epochs: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .milestones
            .iter()
            .map(|f| (f * epochs as f64).round() as usize)
            .collect();
        out.dedup();
        out
    }
}

/// Input representation a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Ego grid only; serves no-collaboration and late collaboration.
    Single,
    /// Merged raw grids of all agents.
    Early,
    /// Feature fusion, optionally with the MI objective.
    Intermediate,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Single => "single",
            ModelKind::Early => "early",
            ModelKind::Intermediate => "intermediate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub egos: EgoPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            egos: EgoPolicy::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Loss terms of one iteration or their epoch means.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    /// Zero when the MI branch is disabled (`alpha = 0` or a non-fusion model).
    pub gmi: f64,
    pub lmi: f64,
    pub mi: f64,
    pub total: f64,
}

/// Combines the four loss terms.
pub fn total_loss(cls: f64, reg: f64, gmi: f64, lmi: f64, config: &LossConfig) -> Result<LossBreakdown> {
    config.validate()?;
    let mi = config.lambda * (config.beta_global * gmi + config.beta_local * lmi);
    Ok(LossBreakdown {
        cls,
        reg,
        gmi,
        lmi,
        mi,
        total: (1.0 - config.alpha) * (cls + reg) + config.alpha * mi,
    })
}

/// Foreground weight of the class-balanced cross entropy.
pub fn foreground_weight(labels: &LabelGrid) -> f64 {
    let fg = labels.foreground_count();
    let bg = labels.foreground.len() - fg;
    if fg == 0 {
        1.0
    } else {
        (bg as f64 / fg as f64).clamp(1.0, 100.0)
    }
}

/// Class-balanced binary cross entropy on logits and smooth-L1 regression at
/// foreground cells, as graph scalars `(L_CLS, L_REG)`.
pub fn downstream_loss(g: &mut Graph, heads: &Heads, labels: &LabelGrid) -> Result<(Var, Var)> {
    let fg = labels.foreground.data();
    let n = fg.len();
    if g.shape(heads.cls_logits) != labels.foreground.shape() {
        return Err(autodiff::TensorError::Shape {
            op: "downstream_loss",
            expected: labels.foreground.shape().to_vec(),
            got: g.shape(heads.cls_logits).to_vec(),
        }
        .into());
    }
    let wf = foreground_weight(labels);
    let fg_count = labels.foreground_count();
    let norm = wf * fg_count as f64 + (n - fg_count) as f64;
    let pos_w: Vec<f64> = fg.iter().map(|&y| y * wf / norm).collect();
    let neg_w: Vec<f64> = fg.iter().map(|&y| (1.0 - y) / norm).collect();
    let neg_logits = g.neg(heads.cls_logits);
    let sp_pos = g.softplus(neg_logits);
    let sp_neg = g.softplus(heads.cls_logits);
    let a = g.weighted_sum(sp_pos, &pos_w)?;
    let b = g.weighted_sum(sp_neg, &neg_w)?;
    let cls = g.add(a, b)?;

    let target = g.constant(labels.regression.clone());
    let diff = g.sub(heads.reg, target)?;
    let huber = g.smooth_l1(diff);
    let reg_w: Vec<f64> = if fg_count == 0 {
        vec![0.0; n * 4]
    } else {
        fg.iter()
            .flat_map(|&y| std::iter::repeat(y / fg_count as f64).take(4))
            .collect()
    };
    let reg = g.weighted_sum(huber, &reg_w)?;
    Ok((cls, reg))
}

/// Multiplier after `step` epochs: `gamma` per milestone reached.
pub fn lr_schedule(step: usize, milestones: &[usize], gamma: f64) -> Result<f64> {
    if milestones.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("lr_schedule: milestones must be strictly increasing"));
    }
    let passed = milestones.iter().filter(|&&m| step >= m).count();
    Ok(gamma.powi(passed as i32))
}

/// Adam with per-element lazy updates: an element whose gradient is exactly
/// zero keeps its value while its moments still decay.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// First and second moment of a parameter.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("optimizer: unknown parameter `{name}`")))?;
            if p.shape() != grad.shape() {
                return Err(Error::contract(format!(
                    "optimizer: gradient of `{name}` has shape {:?}, parameter {:?}",
                    grad.shape(),
                    p.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let rate = lr(name);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                if g != 0.0 {
                    *w -= rate * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                }
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr_multiplier: f64,
    pub wall_seconds: f64,
}

/// Everything that defines one training run apart from data and seed.
pub struct TrainJob<'a> {
    pub arch: &'a Architecture,
    pub kind: ModelKind,
    pub train: &'a TrainConfig,
    pub loss: &'a LossConfig,
    pub optim: &'a OptimConfig,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<EpochRecord>,
}

impl TrainJob<'_> {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        self.optim.validate()
    }

    fn mi_enabled(&self) -> bool {
        self.kind == ModelKind::Intermediate && self.loss.uses_mi()
    }

    fn effective_loss(&self) -> LossConfig {
        if self.kind == ModelKind::Intermediate {
            self.loss.clone()
        } else {
            LossConfig {
                alpha: 0.0,
                ..self.loss.clone()
            }
        }
    }

    /// Runs every epoch from freshly initialized parameters.
    pub fn run(&self, data: &[SceneSample], seed: u64) -> Result<TrainOutcome> {
        self.validate()?;
        let b = self.train.batch_size;
        if data.len() < 2 * b {
            return Err(Error::contract(format!(
                "train: {} scenes cannot supply a batch of {b} and {b} disjoint negatives",
                data.len()
            )));
        }
        let mut params = self.arch.init_params(seed)?;
        let early: Vec<Vec<BevGrid>> = if self.kind == ModelKind::Early {
            data.iter()
                .map(|s| (0..s.agent_count()).map(|e| aggregate_early_bev(s, e, &s.scene.agents)).collect())
                .collect()
        } else {
            Vec::new()
        };
        let milestones = self.optim.milestone_epochs(self.train.epochs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut adam = Adam::new();
        let mut log = Vec::with_capacity(self.train.epochs);
        for epoch in 0..self.train.epochs {
            let start = Instant::now();
            let mult = lr_schedule(epoch, &milestones, self.optim.gamma)?;
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let mut sum = LossBreakdown::default();
            let mut iterations = 0;
            for batch in order.chunks(b) {
                let negatives = if self.mi_enabled() {
                    let mut rest: Vec<usize> = (0..data.len()).filter(|i| !batch.contains(i)).collect();
                    rest.shuffle(&mut rng);
                    rest.truncate(b);
                    rest
                } else {
                    Vec::new()
                };
                let pair_seed = rand::Rng::gen(&mut rng);
                let (row, grads) = self.iteration(&params, data, &early, batch, &negatives, pair_seed)?;
                adam.step(&mut params, &grads, |name| {
                    mult * match ParamGroup::of(name) {
                        ParamGroup::Pipeline => self.optim.lr_pipeline,
                        ParamGroup::Discriminator => self.optim.lr_discriminator,
                    }
                })?;
                for (acc, v) in [
                    (&mut sum.cls, row.cls),
                    (&mut sum.reg, row.reg),
                    (&mut sum.gmi, row.gmi),
                    (&mut sum.lmi, row.lmi),
                ] {
                    *acc += v;
                }
                iterations += 1;
            }
            let k = iterations as f64;
            let mean = total_loss(sum.cls / k, sum.reg / k, sum.gmi / k, sum.lmi / k, &self.effective_loss())?;
            log.push(EpochRecord {
                epoch: epoch + 1,
                loss: mean,
                lr_multiplier: mult,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
        Ok(TrainOutcome { params, log })
    }

    /// Builds the objective for one minibatch and returns its terms and the
    /// gradient of every bound parameter.
    pub fn iteration(
        &self,
        params: &ParamSet,
        data: &[SceneSample],
        early: &[Vec<BevGrid>],
        batch: &[usize],
        negatives: &[usize],
        pair_seed: u64,
    ) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
        let mut g = Graph::new();
        let mi = self.mi_enabled();
        let bound = if mi {
            BoundParams::new(params, &mut g)
        } else {
            BoundParams::pipeline(params, &mut g)
        };
        let net = Net::new(self.arch, &bound);
        let mut cls_terms = Vec::new();
        let mut reg_terms = Vec::new();
        // Positive-side views grouped by ego index.
        let mut groups: BTreeMap<usize, Vec<SceneViews<FeatureMap>>> = BTreeMap::new();

        for &s in batch {
            let sample = &data[s];
            let egos = self.train.egos.egos(sample.agent_count());
            match self.kind {
                ModelKind::Single | ModelKind::Early => {
                    for ego in egos {
                        let bev = match self.kind {
                            ModelKind::Early => &early[s][ego],
                            _ => &sample.bev[ego],
                        };
                        let f = net.encode(&mut g, bev, ego)?;
                        let heads = net.decode_and_head(&mut g, &f)?;
                        let (c, r) = downstream_loss(&mut g, &heads, &sample.labels[ego])?;
                        cls_terms.push(c);
                        reg_terms.push(r);
                    }
                }
                ModelKind::Intermediate => {
                    let individual = encode_all(&net, &mut g, sample)?;
                    for ego in egos {
                        let views = net.aligned_views(&mut g, &individual, &sample.scene.agents, ego)?;
                        let fused = net.fuse(&mut g, &individual[ego], &views)?;
                        let heads = net.decode_and_head(&mut g, &fused.feature)?;
                        let (c, r) = downstream_loss(&mut g, &heads, &sample.labels[ego])?;
                        cls_terms.push(c);
                        reg_terms.push(r);
                        if mi {
                            groups.entry(ego).or_default().push(SceneViews {
                                scene_id: sample.scene.id,
                                aligned: views,
                                collab: Some(fused.feature),
                            });
                        }
                    }
                }
            }
        }
        let frames = cls_terms.len() as f64;
        let cls_sum = g.add_n(&cls_terms)?;
        let cls = g.scale(cls_sum, 1.0 / frames);
        let reg_sum = g.add_n(&reg_terms)?;
        let reg = g.scale(reg_sum, 1.0 / frames);

        let loss = self.effective_loss();
        let mut gmi_value = 0.0;
        let mut lmi_value = 0.0;
        let supervised = g.add(cls, reg)?;
        let mut total = g.scale(supervised, 1.0 - loss.alpha);
        if mi {
            let mut neg_individual = Vec::with_capacity(negatives.len());
            for &s in negatives {
                neg_individual.push((s, encode_all(&net, &mut g, &data[s])?));
            }
            let mut gmi_terms = Vec::new();
            let mut lmi_terms = Vec::new();
            for (&ego, scenes) in &groups {
                let mut neg_views = Vec::with_capacity(neg_individual.len());
                for (s, individual) in &neg_individual {
                    let sample = &data[*s];
                    let frame = ego % sample.agent_count();
                    let aligned = net.aligned_views(&mut g, individual, &sample.scene.agents, frame)?;
                    neg_views.push(SceneViews {
                        scene_id: sample.scene.id,
                        aligned,
                        collab: None,
                    });
                }
                let pairs = sample_pairs(scenes, &neg_views, ego, pair_seed ^ ego as u64)?;
                let losses = net.mvmi_losses(&mut g, &pairs)?;
                let share = scenes.len() as f64 / frames;
                gmi_terms.push(g.scale(losses.global, share));
                lmi_terms.push(g.scale(losses.local, share));
            }
            let gmi = g.add_n(&gmi_terms)?;
            let lmi = g.add_n(&lmi_terms)?;
            gmi_value = g.value(gmi).item()?;
            lmi_value = g.value(lmi).item()?;
            let wg = g.scale(gmi, loss.beta_global);
            let wl = g.scale(lmi, loss.beta_local);
            let mi_sum = g.add(wg, wl)?;
            let mi_loss = g.scale(mi_sum, loss.lambda * loss.alpha);
            total = g.add(total, mi_loss)?;
        }
        let grads = g.backward(total)?;
        let row = total_loss(g.value(cls).item()?, g.value(reg).item()?, gmi_value, lmi_value, &loss)?;
        Ok((row, bound.gradients(&grads)))
    }
}

fn encode_all(net: &Net<'_>, g: &mut Graph, sample: &SceneSample) -> Result<Vec<FeatureMap>> {
    (0..sample.agent_count())
        .map(|j| net.encode(g, &sample.bev[j], j))
        .collect()
}
