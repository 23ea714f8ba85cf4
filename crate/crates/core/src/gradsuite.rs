//! Finite-difference verification of every primitive and of the composite
//! pipeline, discriminator and loss paths.

use autodiff::{finite_difference_check, relative_error, Activation, Graph, Padding, Rigid2, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Se2;
use crate::params::{BoundParams, ParamSet};
use crate::mvmi::{sample_pairs, SceneViews};
use crate::perception::{Architecture, FeatureMap, Net, NetConfig, ViewOrigin};
use crate::scene::{BevGrid, GridConfig, LabelGrid};
use crate::trainer::downstream_loss;

/// Tolerance for linear maps, convolutions and elementwise activations.
pub const TIGHT: f64 = 1e-6;
/// Tolerance for every other primitive and for composites.
pub const LOOSE: f64 = 1e-4;
/// Central differences are exact for maps that are at most quadratic in the
/// checked input, so those use a wide step that keeps round-off negligible.
const POLY_STEP: f64 = 1e-2;
const SMOOTH_STEP: f64 = 1e-5;
/// Relu networks are only piecewise smooth: a wide step may cross a kink and
/// a narrow one drowns entries near the 1e-8 floor in round-off. Each element
/// is scored at its best step from this ladder.
const COMPOSITE_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Largest relative error over all seeds.
    pub worst: f64,
    pub tolerance: f64,
    pub seeds: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from the kinks at 0 and ±1.
fn away_from_kinks(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = if rng.gen_bool(0.5) {
            rng.gen_range(0.1..0.9)
        } else {
            rng.gen_range(1.1..2.0)
        };
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn fd_check(f: impl Fn(&mut Graph, Var) -> Result<Var>, point: &Tensor, step: f64) -> Result<f64> {
    let adapted = |g: &mut Graph, x: Var| {
        f(g, x).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::Contract(other.to_string()),
        })
    };
    Ok(finite_difference_check(adapted, point, step)?)
}

/// Per element, the best agreement between the reverse-mode gradient and
/// central differences over `steps`.
fn fd_check_ladder(f: impl Fn(&mut Graph, Var) -> Result<Var>, point: &Tensor, steps: [f64; 3]) -> Result<f64> {
    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item()?)
    };
    let mut g = Graph::new();
    let v = g.param(point.clone());
    let out = f(&mut g, v)?;
    let analytic = g.backward(out)?.get(v).cloned().expect("point is a trainable leaf");

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        let mut best = f64::INFINITY;
        for h in steps {
            probe.data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            best = best.min(relative_error(analytic.data()[i], (plus - minus) / (2.0 * h)));
        }
        probe.data_mut()[i] = orig;
        worst = worst.max(best);
    }
    Ok(worst)
}

/// Fixed random linear functional that turns any output into a scalar.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w: Vec<f64> = (0..g.value(out).len()).map(|_| rng.gen_range(0.5..1.5)).collect();
    Ok(g.weighted_sum(out, &w)?)
}

type Build = dyn Fn(&mut Graph, Var, u64) -> Result<Var>;

struct Case {
    name: &'static str,
    tolerance: f64,
    step: f64,
    point: fn(&mut ChaCha8Rng) -> Tensor,
    build: Box<Build>,
}

fn case(
    name: &'static str,
    tolerance: f64,
    step: f64,
    point: fn(&mut ChaCha8Rng) -> Tensor,
    build: impl Fn(&mut Graph, Var, u64) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        tolerance,
        step,
        point,
        build: Box::new(build),
    }
}

fn run_case(c: &Case, seeds: std::ops::Range<u64>) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in seeds.clone() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = (c.point)(&mut rng);
        let err = fd_check(
            |g, x| {
                let y = (c.build)(g, x, seed)?;
                Ok(probe(g, y, seed)?)
            },
            &point,
            c.step,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: c.name.to_string(),
        worst,
        tolerance: c.tolerance,
        seeds: seeds.count(),
    })
}

fn constant(g: &mut Graph, seed: u64, salt: u64, shape: &[usize]) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(salt));
    g.constant(random(&mut rng, shape))
}

fn primitive_cases() -> Vec<Case> {
    vec![
        case("conv2d 3x3 stride 1 same (input)", TIGHT, POLY_STEP, |r| random(r, &[8, 8, 2]), |g, x, s| {
            let k = constant(g, s, 1, &[3, 3, 2, 3]);
            Ok(g.conv2d(x, k, 1, Padding::Same)?)
        }),
        case("conv2d 3x3 stride 2 same (kernel)", TIGHT, POLY_STEP, |r| random(r, &[3, 3, 2, 3]), |g, k, s| {
            let x = constant(g, s, 2, &[8, 8, 2]);
            Ok(g.conv2d(x, k, 2, Padding::Same)?)
        }),
        case("conv2d 3x3 valid (input)", TIGHT, POLY_STEP, |r| random(r, &[7, 6, 2]), |g, x, s| {
            let k = constant(g, s, 3, &[3, 3, 2, 2]);
            Ok(g.conv2d(x, k, 1, Padding::Valid)?)
        }),
        case("linear 16->8 (input)", TIGHT, POLY_STEP, |r| random(r, &[16]), |g, x, s| {
            let w = constant(g, s, 4, &[16, 8]);
            let b = constant(g, s, 5, &[8]);
            Ok(g.linear(x, w, b)?)
        }),
        case("linear 16->8 (weight)", TIGHT, POLY_STEP, |r| random(r, &[16, 8]), |g, w, s| {
            let x = constant(g, s, 6, &[16]);
            let b = constant(g, s, 7, &[8]);
            Ok(g.linear(x, w, b)?)
        }),
        case("linear 16->8 (bias)", TIGHT, POLY_STEP, |r| random(r, &[8]), |g, b, s| {
            let x = constant(g, s, 8, &[16]);
            let w = constant(g, s, 9, &[16, 8]);
            Ok(g.linear(x, w, b)?)
        }),
        case("relu", TIGHT, SMOOTH_STEP, |r| away_from_kinks(r, &[4, 5]), |g, x, _| Ok(g.activation(x, Activation::Relu))),
        case("sigmoid", TIGHT, SMOOTH_STEP, |r| random(r, &[4, 5]), |g, x, _| Ok(g.activation(x, Activation::Sigmoid))),
        case("softplus", TIGHT, SMOOTH_STEP, |r| random(r, &[4, 5]), |g, x, _| Ok(g.activation(x, Activation::Softplus))),
        case("bilinear_warp", LOOSE, POLY_STEP, |r| random(r, &[6, 6, 2]), |g, x, _| {
            Ok(g.bilinear_warp(x, &Rigid2::new(0.35, 0.8, -1.2))?)
        }),
        case("upsample2x", LOOSE, POLY_STEP, |r| random(r, &[3, 4, 2]), |g, x, _| Ok(g.upsample2x(x)?)),
        case("softmax", LOOSE, SMOOTH_STEP, |r| random(r, &[4, 4, 3]), |g, x, _| Ok(g.softmax_last(x)?)),
        case("mul_channels", LOOSE, POLY_STEP, |r| random(r, &[4, 4, 3]), |g, x, s| {
            let w = constant(g, s, 10, &[4, 4, 1]);
            Ok(g.mul_channels(x, w)?)
        }),
        case("channel_bias", LOOSE, POLY_STEP, |r| random(r, &[3]), |g, b, s| {
            let x = constant(g, s, 11, &[4, 4, 3]);
            Ok(g.channel_bias(x, b)?)
        }),
        case("concat/slice/tile", LOOSE, POLY_STEP, |r| random(r, &[5]), |g, x, s| {
            let other = constant(g, s, 12, &[5]);
            let c = g.concat(&[x, other])?;
            let part = g.slice_last(c, 2, 6)?;
            Ok(g.tile(part, 3)?)
        }),
        case("smooth_l1", LOOSE, SMOOTH_STEP, |r| away_from_kinks(r, &[4, 5]), |g, x, _| Ok(g.smooth_l1(x))),
        case("arithmetic", LOOSE, POLY_STEP, |r| random(r, &[3, 4]), |g, x, s| {
            let c = constant(g, s, 13, &[3, 4]);
            let a = g.add(x, c)?;
            let m = g.mul(a, x)?;
            let d = g.sub(m, c)?;
            let n = g.neg(d);
            let sc = g.scale(n, 1.5);
            let sum = g.add_n(&[sc, x, a])?;
            let r = g.reshape(sum, &[12])?;
            let mean = g.mean(r)?;
            let total = g.sum(r);
            let mean = g.reshape(mean, &[1])?;
            let total = g.reshape(total, &[1])?;
            Ok(g.concat(&[mean, total])?)
        }),
    ]
}

/// Small network whose widths keep the composite checks fast.
pub fn tiny_architecture() -> Architecture {
    let net = NetConfig {
        encoder_channels: [3, 4],
        collab_hidden: 3,
        decoder_channels: 3,
        projection_dim: 3,
        global_hidden: 6,
        local_hidden: 3,
        compression_exponent: 1,
    };
    let grid = GridConfig {
        size: 8,
        channels: 2,
        ..GridConfig::default()
    };
    Architecture::new(net, grid).expect("static widths are valid")
}

/// Initialized parameters with nonzero biases, so no relu sits exactly on
/// its kink for zero inputs.
fn tiny_params(arch: &Architecture, seed: u64) -> Result<ParamSet> {
    let mut params = arch.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    Ok(params)
}

fn tiny_bevs(arch: &Architecture, seed: u64, agents: usize) -> Vec<BevGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe5);
    let g = &arch.grid;
    (0..agents)
        .map(|_| BevGrid {
            occupancy: Tensor::from_fn([g.size, g.size, g.channels], |_| f64::from(rng.gen_bool(0.3))),
            resolution: g.resolution,
        })
        .collect()
}

fn tiny_poses(seed: u64) -> Vec<Se2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x905e);
    (0..3)
        .map(|i| {
            if i == 0 {
                Se2::new(0.0, 0.0, 0.2)
            } else {
                Se2::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-0.6..0.6))
            }
        })
        .collect()
}

/// Pipeline output for the tiny architecture with `name` replaced by `leaf`.
fn pipeline(g: &mut Graph, arch: &Architecture, params: &ParamSet, name: &str, leaf: Var, seed: u64, loss: bool) -> Result<Var> {
    let mut bound = BoundParams::filtered(params, g, |k| k != name);
    bound.insert(name, leaf);
    let net = Net::new(arch, &bound);
    let bevs = tiny_bevs(arch, seed, 3);
    let poses = tiny_poses(seed);
    let individual = bevs
        .iter()
        .enumerate()
        .map(|(j, b)| net.encode(g, b, j))
        .collect::<Result<Vec<_>>>()?;
    let views = net.aligned_views(g, &individual, &poses, 0)?;
    let fused = net.fuse(g, &individual[0], &views)?;
    let heads = net.decode_and_head(g, &fused.feature)?;
    if loss {
        let (cls, reg) = downstream_loss(g, &heads, &tiny_labels(arch, seed))?;
        let cls = g.reshape(cls, &[1])?;
        let reg = g.reshape(reg, &[1])?;
        return Ok(g.concat(&[cls, reg])?);
    }
    let cls = g.flatten(heads.cls)?;
    let reg = g.flatten(heads.reg)?;
    Ok(g.concat(&[cls, reg])?)
}

fn tiny_labels(arch: &Architecture, seed: u64) -> LabelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1abe1);
    let n = arch.grid.size;
    let foreground = Tensor::from_fn([n, n], |_| f64::from(rng.gen_bool(0.2)));
    let regression = Tensor::from_fn([n, n, 4], |i| foreground.data()[i / 4] * rng.gen_range(-0.5..0.5));
    LabelGrid { foreground, regression }
}

/// `[L_GMI, L_LMI]` over two batch scenes and one negative scene of two
/// agents each. The leaf is either parameter `target` or scene 1's second
/// aligned view.
fn mi_losses(g: &mut Graph, arch: &Architecture, params: &ParamSet, leaf: Var, target: Option<&str>, seed: u64) -> Result<Var> {
    let mut bound = BoundParams::filtered(params, g, |k| Some(k) != target);
    if let Some(name) = target {
        bound.insert(name, leaf);
    }
    let net = Net::new(arch, &bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce);
    let mut scenes = Vec::new();
    for id in 1..=3u64 {
        let aligned = (0..2)
            .map(|j| {
                let var = if target.is_none() && id == 1 && j == 1 {
                    leaf
                } else {
                    g.constant(feature_point(arch, &mut rng))
                };
                FeatureMap {
                    var,
                    frame: 0,
                    source: j,
                    origin: ViewOrigin::Aligned,
                }
            })
            .collect();
        let collab = FeatureMap {
            var: g.constant(feature_point(arch, &mut rng)),
            frame: 0,
            source: 0,
            origin: ViewOrigin::Collaborative,
        };
        scenes.push(SceneViews {
            scene_id: id,
            aligned,
            collab: Some(collab),
        });
    }
    let negatives = scenes.split_off(2);
    let batch = sample_pairs(&scenes, &negatives, 0, seed)?;
    let losses = net.mvmi_losses(g, &batch)?;
    let gl = g.reshape(losses.global, &[1])?;
    let ll = g.reshape(losses.local, &[1])?;
    Ok(g.concat(&[gl, ll])?)
}

fn feature_point(arch: &Architecture, rng: &mut ChaCha8Rng) -> Tensor {
    let [h, w, c] = arch.feature_shape();
    Tensor::from_fn([h, w, c], |_| rng.gen_range(0.0..1.0))
}

fn collab_constant(g: &mut Graph, arch: &Architecture, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc011);
    let t = feature_point(arch, &mut rng);
    FeatureMap {
        var: g.constant(t),
        frame: 0,
        source: 0,
        origin: ViewOrigin::Collaborative,
    }
}

fn individual(var: Var) -> FeatureMap {
    FeatureMap {
        var,
        frame: 0,
        source: 1,
        origin: ViewOrigin::Aligned,
    }
}

enum Scorer {
    Global,
    Local,
}

/// Discriminator score with either the individual view or one parameter as
/// the leaf under test.
fn score(g: &mut Graph, arch: &Architecture, params: &ParamSet, leaf: Var, target: Option<&str>, which: &Scorer, seed: u64) -> Result<Var> {
    let mut bound = BoundParams::filtered(params, g, |k| Some(k) != target);
    let view = match target {
        Some(name) => {
            bound.insert(name, leaf);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
            individual(g.constant(feature_point(arch, &mut rng)))
        }
        None => individual(leaf),
    };
    let net = Net::new(arch, &bound);
    let collab = collab_constant(g, arch, seed);
    let proj = net.project(g, &collab)?;
    match which {
        Scorer::Global => net.score_global(g, &view, proj),
        Scorer::Local => net.score_local(g, &view, proj),
    }
}

fn param_point(arch: &Architecture, name: &str, seed: u64) -> Result<Tensor> {
    Ok(tiny_params(arch, seed)?
        .get(name)
        .cloned()
        .expect("tiny architecture defines the parameter"))
}

#[derive(Clone, Copy)]
enum Path {
    Pipeline,
    DetectionLoss,
    Score,
    MiLoss,
}

fn composite_param_check(label: &str, path: Path, name: &'static str, seeds: std::ops::Range<u64>) -> Result<CheckResult> {
    let arch = tiny_architecture();
    let mut worst: f64 = 0.0;
    for seed in seeds.clone() {
        let params = tiny_params(&arch, seed)?;
        let point = param_point(&arch, name, seed)?;
        let err = fd_check_ladder(
            |g, x| {
                let y = match path {
                    Path::Pipeline => pipeline(g, &arch, &params, name, x, seed, false)?,
                    Path::DetectionLoss => pipeline(g, &arch, &params, name, x, seed, true)?,
                    Path::Score if name.starts_with("mi.local") => {
                        score(g, &arch, &params, x, Some(name), &Scorer::Local, seed)?
                    }
                    Path::Score => score(g, &arch, &params, x, Some(name), &Scorer::Global, seed)?,
                    Path::MiLoss => mi_losses(g, &arch, &params, x, Some(name), seed)?,
                };
                Ok(probe(g, y, seed)?)
            },
            &point,
            COMPOSITE_STEPS,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: format!("{label} wrt {name}"),
        worst,
        tolerance: LOOSE,
        seeds: seeds.count(),
    })
}

fn composite_view_check(label: &str, which: Scorer, seeds: std::ops::Range<u64>) -> Result<CheckResult> {
    let arch = tiny_architecture();
    let mut worst: f64 = 0.0;
    for seed in seeds.clone() {
        let params = tiny_params(&arch, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
        let point = feature_point(&arch, &mut rng);
        let err = fd_check_ladder(
            |g, x| {
                let y = score(g, &arch, &params, x, None, &which, seed)?;
                Ok(probe(g, y, seed)?)
            },
            &point,
            COMPOSITE_STEPS,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: format!("{label} wrt individual view"),
        worst,
        tolerance: LOOSE,
        seeds: seeds.count(),
    })
}

fn mi_view_check(seeds: std::ops::Range<u64>) -> Result<CheckResult> {
    let arch = tiny_architecture();
    let mut worst: f64 = 0.0;
    for seed in seeds.clone() {
        let params = tiny_params(&arch, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
        let point = feature_point(&arch, &mut rng);
        let err = fd_check_ladder(
            |g, x| {
                let y = mi_losses(g, &arch, &params, x, None, seed)?;
                probe(g, y, seed)
            },
            &point,
            COMPOSITE_STEPS,
        )?;
        worst = worst.max(err);
    }
    Ok(CheckResult {
        name: "mvmi losses wrt individual view".to_string(),
        worst,
        tolerance: LOOSE,
        seeds: seeds.count(),
    })
}

/// Every primitive check, then the composites, each over `seeds`.
pub fn run_gradient_suite(seeds: std::ops::Range<u64>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for c in primitive_cases() {
        out.push(run_case(&c, seeds.clone())?);
    }
    let composites: [(&str, Path, &'static str); 14] = [
        ("encode-warp-fuse-decode", Path::Pipeline, "enc.conv1.w"),
        ("encode-warp-fuse-decode", Path::Pipeline, "comp.down.w"),
        ("encode-warp-fuse-decode", Path::Pipeline, "col.conv1.w"),
        ("encode-warp-fuse-decode", Path::Pipeline, "col.conv2.w"),
        ("encode-warp-fuse-decode", Path::Pipeline, "dec.conv2.w"),
        ("detection loss", Path::DetectionLoss, "head.cls.w"),
        ("detection loss", Path::DetectionLoss, "head.reg.b"),
        ("detection loss", Path::DetectionLoss, "enc.conv3.w"),
        ("score_global", Path::Score, "mi.global.fc2.w"),
        ("score_global", Path::Score, "mi.proj.w"),
        ("score_local", Path::Score, "mi.local.conv1.w"),
        ("mvmi losses", Path::MiLoss, "mi.global.fc1.w"),
        ("mvmi losses", Path::MiLoss, "mi.local.conv2.w"),
        ("mvmi losses", Path::MiLoss, "mi.proj.b"),
    ];
    for (label, path, name) in composites {
        out.push(composite_param_check(label, path, name, seeds.clone())?);
    }
    out.push(composite_view_check("score_global", Scorer::Global, seeds.clone())?);
    out.push(composite_view_check("score_local", Scorer::Local, seeds.clone())?);
    out.push(mi_view_check(seeds.clone())?);
    Ok(out)
}
