//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p coperception --test acceptance`.

mod common;

use std::f64::consts::LN_2;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use autodiff::{Graph, Tensor};
use coperception::config::ExperimentConfig;
use coperception::error::Result;
use coperception::eval::{compute_ap, BandwidthConfig, CollabMode, EvalReport, EvalSetting};
use coperception::experiment::{eval_settings, generate, noise_settings, train, LoadedModels, ModelSpec};
use coperception::geometry::Rect;
use coperception::gradsuite::run_gradient_suite;
use coperception::mvmi::{estimate_js_mi, estimate_local_mi, js_mi, pair_weights, sample_pairs, SceneViews};
use coperception::params::{BoundParams, ParamGroup};
use coperception::perception::{nms, Architecture, Detection, FeatureMap, Net, NetConfig, ViewOrigin};
use coperception::scene::{generate_scene, raycast_observe, voxelize, GridConfig, HitPoint, SceneConfig, SensorConfig};
use coperception::trainer::{total_loss, Adam, LossConfig, ModelKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Runs one criterion and prints its line; errors count as failures.
fn criterion(id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    let (mut passed, mut detail) = match result {
        Ok(o) => (o.passed, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(b) = budget {
        if elapsed > b {
            passed = false;
            detail.push_str(&format!("; over the {}s budget", b.as_secs()));
        }
    }
    println!(
        "{} [{id}] {name}: {detail} ({:.1}s)",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    passed
}

fn bandwidth() -> Result<Outcome> {
    let bw = BandwidthConfig::default();
    let full = bw.frame_bytes(&EvalSetting::new(CollabMode::Intermediate), 1, 0)?;
    let r32 = bw.frame_bytes(
        &EvalSetting {
            compression_exponent: 5,
            ..EvalSetting::new(CollabMode::Intermediate)
        },
        1,
        0,
    )?;
    let none = bw.frame_bytes(&EvalSetting::new(CollabMode::None), 4, 10)?;
    let ok = full == 1024 * 1024 && r32 == 32 * 1024 && none == 0;
    Ok(outcome(ok, format!("full {} KiB, 1/32 {} KiB, none {none} B", full / 1024, r32 / 1024)))
}

fn gradients() -> Result<Outcome> {
    let results = run_gradient_suite(0..10)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst_ratio = results.iter().map(|r| r.worst / r.tolerance).fold(0.0, f64::max);
    Ok(outcome(
        failed.is_empty(),
        format!(
            "{} checks x 10 seeds, worst error/tolerance {worst_ratio:.2e}{}",
            results.len(),
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
        ),
    ))
}

/// Global discriminator trained on synthetic 8-dimensional views, then
/// evaluated on fresh draws. Dependent collaborative views are noisy copies
/// of the individual view; negatives pair each view with another draw's.
fn trained_js_estimate(seed: u64, dependent: bool) -> Result<f64> {
    let net_cfg = NetConfig {
        encoder_channels: [2, 2],
        collab_hidden: 2,
        decoder_channels: 2,
        projection_dim: 8,
        global_hidden: 32,
        local_hidden: 2,
        compression_exponent: 0,
    };
    let grid = GridConfig {
        size: 4,
        channels: 1,
        ..GridConfig::default()
    };
    let arch = Architecture::new(net_cfg, grid)?;
    let mut params = arch.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = arch.feature_shape();
    let draw = |rng: &mut ChaCha8Rng| {
        let x = Tensor::from_fn(dims.to_vec(), |_| StandardNormal.sample(rng));
        let y = if dependent {
            x.zip_map(&Tensor::from_fn(dims.to_vec(), |_| StandardNormal.sample(rng)), |a, n: f64| a + 0.3 * n)
                .expect("same shape")
        } else {
            Tensor::from_fn(dims.to_vec(), |_| StandardNormal.sample(rng))
        };
        (x, y)
    };
    let view = |g: &mut Graph, t: Tensor| FeatureMap {
        var: g.constant(t),
        frame: 0,
        source: 0,
        origin: ViewOrigin::Aligned,
    };
    let scores = |params: &coperception::params::ParamSet,
                  g: &mut Graph,
                  pairs: &[(Tensor, Tensor)]|
     -> Result<(BoundParams, autodiff::Var, autodiff::Var)> {
        let bound = BoundParams::filtered(params, g, |n| ParamGroup::of(n) == ParamGroup::Discriminator);
        let net = Net::new(&arch, &bound);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, (_, y)) in pairs.iter().enumerate() {
            let collab = view(g, y.clone());
            let proj = net.project(g, &collab)?;
            let own = view(g, pairs[i].0.clone());
            let other = view(g, pairs[(i + 1) % pairs.len()].0.clone());
            pos.push(net.score_global(g, &own, proj)?);
            neg.push(net.score_global(g, &other, proj)?);
        }
        let p = g.concat(&pos)?;
        let n = g.concat(&neg)?;
        Ok((bound, p, n))
    };
    let mut adam = Adam::new();
    for _ in 0..600 {
        let batch: Vec<_> = (0..32).map(|_| draw(&mut rng)).collect();
        let mut g = Graph::new();
        let (bound, p, n) = scores(&params, &mut g, &batch)?;
        let mi = js_mi(&mut g, p, n)?;
        let loss = g.neg(mi);
        let grads = g.backward(loss)?;
        adam.step(&mut params, &bound.gradients(&grads), |_| 1e-3)?;
    }
    let held_out: Vec<_> = (0..2000).map(|_| draw(&mut rng)).collect();
    let mut g = Graph::new();
    let (_, p, n) = scores(&params, &mut g, &held_out)?;
    estimate_js_mi(g.value(p).data(), g.value(n).data())
}

fn js_estimator() -> Result<Outcome> {
    let zero = estimate_js_mi(&[0.0; 16], &[0.0; 16])?;
    let zero_ok = (zero + 2.0 * LN_2).abs() <= 1e-12;
    let mut independent = Vec::new();
    let mut dependent = Vec::new();
    for seed in 0..3 {
        independent.push(trained_js_estimate(seed, false)?);
        dependent.push(trained_js_estimate(seed, true)?);
    }
    let floor = -2.0 * LN_2;
    let ind_ok = independent.iter().all(|v| (v - floor).abs() <= 0.1);
    let dep_ok = dependent.iter().all(|v| v - floor >= 0.3);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    Ok(outcome(
        zero_ok && ind_ok && dep_ok,
        format!(
            "zero scores {zero:.15}, independent {} (target {floor:.3} +- 0.1), dependent {} (need >= {:.3})",
            fmt(&independent),
            fmt(&dependent),
            floor + 0.3
        ),
    ))
}

fn identities() -> Result<Outcome> {
    const TRIALS: u64 = 1000;
    let arch = Architecture::new(
        NetConfig {
            encoder_channels: [4, 4],
            collab_hidden: 4,
            decoder_channels: 4,
            projection_dim: 4,
            global_hidden: 4,
            local_hidden: 4,
            compression_exponent: 0,
        },
        GridConfig {
            size: 8,
            ..GridConfig::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut worst_identity = 0.0f64;
    let mut worst_simplex = 0.0f64;
    for trial in 0..TRIALS {
        let params = arch.init_params(trial)?;
        let mut g = Graph::new();
        let bound = BoundParams::pipeline(&params, &mut g);
        let net = Net::new(&arch, &bound);
        let n = rng.gen_range(1..=4);
        let views: Vec<FeatureMap> = (0..n)
            .map(|j| FeatureMap {
                var: g.constant(Tensor::from_fn(arch.feature_shape().to_vec(), |_| rng.gen_range(-2.0..2.0))),
                frame: 0,
                source: j,
                origin: ViewOrigin::Aligned,
            })
            .collect();
        let alone = net.fuse(&mut g, &views[0], &views[..1])?;
        worst_identity = worst_identity.max(g.value(alone.feature.var).max_abs_diff(g.value(views[0].var)).unwrap_or(f64::INFINITY));
        let fused = net.fuse(&mut g, &views[0], &views)?;
        let cells = arch.feature_size() * arch.feature_size();
        for cell in 0..cells {
            let ws: Vec<f64> = fused.weights.iter().map(|(_, w)| g.value(*w).data()[cell]).collect();
            let outside = ws.iter().map(|w| (-w).max(w - 1.0).max(0.0)).fold(0.0, f64::max);
            worst_simplex = worst_simplex.max(outside).max((ws.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut worst_loss = 0.0f64;
    for _ in 0..TRIALS {
        let (cls, reg, gmi, lmi) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
        let bg = rng.gen_range(0.0..1.0);
        let cfg = LossConfig {
            alpha: if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..=1.0) },
            lambda: rng.gen_range(0.01..10.0),
            beta_global: bg,
            beta_local: 1.0 - bg,
        };
        let b = total_loss(cls, reg, gmi, lmi, &cfg)?;
        let mi = cfg.lambda * (cfg.beta_global * gmi + cfg.beta_local * lmi);
        let mut err = (b.mi - mi).abs().max((b.total - ((1.0 - cfg.alpha) * (cls + reg) + cfg.alpha * b.mi)).abs());
        if cfg.alpha == 0.0 && b.total != cls + reg {
            err = f64::INFINITY;
        }
        worst_loss = worst_loss.max(err);
    }

    let mut worst_local = 0.0f64;
    for _ in 0..TRIALS {
        let (h, w) = (rng.gen_range(1..8), rng.gen_range(1..8));
        let pos = Tensor::from_fn([h, w], |_| rng.gen_range(-4.0..4.0));
        let neg = Tensor::from_fn([h, w], |_| rng.gen_range(-4.0..4.0));
        let local = estimate_local_mi(&pos, &neg)?;
        let per_voxel = pos
            .data()
            .iter()
            .zip(neg.data())
            .map(|(&p, &n)| estimate_js_mi(&[p], &[n]))
            .sum::<Result<f64>>()?
            / (h * w) as f64;
        let flat = estimate_js_mi(pos.data(), neg.data())?;
        worst_local = worst_local.max((local - per_voxel).abs()).max((local - flat).abs());
    }

    let ok = worst_identity <= 1e-12 && worst_simplex <= 1e-12 && worst_loss <= 1e-12 && worst_local <= 1e-12;
    Ok(outcome(
        ok,
        format!(
            "{TRIALS} trials each; max deviations: identity {worst_identity:.1e}, simplex {worst_simplex:.1e}, \
             loss {worst_loss:.1e}, local flatten {worst_local:.1e}"
        ),
    ))
}

fn pairs() -> Result<Outcome> {
    let scene = |id: u64, n: usize| SceneViews {
        scene_id: id,
        aligned: (0..n).map(|j| (id, j)).collect::<Vec<_>>(),
        collab: Some((id, usize::MAX)),
    };
    let mut ok = true;
    for n in 1..=4 {
        for b in 1..=4 {
            let batch: Vec<_> = (0..b as u64).map(|i| scene(i, n)).collect();
            let negs: Vec<_> = (100..100 + b as u64).map(|i| scene(i, n)).collect();
            let p = sample_pairs(&batch, &negs, 0, 3)?;
            ok &= p.positives.len() == n * b && p.negatives.len() == n * b;
            ok &= p.negatives.iter().all(|q| q.individual.0 >= 100 && q.collab.0 < 100);
            ok &= (pair_weights(&p.positives).iter().sum::<f64>() - 1.0).abs() < 1e-12;
            ok &= p == sample_pairs(&batch, &negs, 0, 3)?;
            let overlap = vec![scene(0, n)];
            ok &= sample_pairs(&batch, &overlap, 0, 3).is_err();
        }
    }
    Ok(outcome(ok, "16 (N, B) grids: counts, provenance, overlap rejection, determinism"))
}

fn random_rect(rng: &mut ChaCha8Rng) -> Rect {
    Rect::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(1.0..3.0), rng.gen_range(2.0..5.0))
}

fn oracles() -> Result<Outcome> {
    const INSTANCES: u64 = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let det = |rect, score| Detection { rect, score, cell: (0, 0) };

    let mut nms_bad = 0;
    for _ in 0..INSTANCES {
        let boxes: Vec<Detection> = (0..rng.gen_range(0..15))
            .map(|_| det(random_rect(&mut rng), (rng.gen_range(0..6) as f64) / 5.0))
            .collect();
        let thr = rng.gen_range(0.1..0.6);
        nms_bad += usize::from(!common::nms_is_consistent(&boxes, &nms(&boxes, thr), thr));
    }

    let mut ap_bad = 0;
    for _ in 0..INSTANCES {
        let frames = rng.gen_range(1..=3);
        let mut gts: Vec<Vec<Rect>> = vec![Vec::new(); frames];
        for _ in 0..rng.gen_range(1..=5) {
            gts[rng.gen_range(0..frames)].push(random_rect(&mut rng));
        }
        let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); frames];
        for _ in 0..rng.gen_range(0..=10) {
            let f = rng.gen_range(0..frames);
            let rect = match gts[f].len() {
                n if n > 0 && rng.gen_bool(0.6) => {
                    let g = gts[f][rng.gen_range(0..n)];
                    Rect::new(g.cx + rng.gen_range(-0.6..0.6), g.cy + rng.gen_range(-0.6..0.6), g.width, g.length)
                }
                _ => random_rect(&mut rng),
            };
            dets[f].push(det(rect, rng.gen_range(0.0..1.0)));
        }
        for thr in [0.5, 0.7] {
            let fast = compute_ap(&dets, &gts, thr)?;
            ap_bad += usize::from((fast - common::exhaustive_ap(&dets, &gts, thr)).abs() > 1e-10);
        }
    }

    let grid = GridConfig::default();
    let mut voxel_bad = 0;
    for _ in 0..INSTANCES {
        let ego = coperception::geometry::Se2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0));
        let pts: Vec<HitPoint> = (0..rng.gen_range(0..200))
            .map(|_| HitPoint {
                x: ego.x + rng.gen_range(-10.0..10.0),
                y: ego.y + rng.gen_range(-10.0..10.0),
                height: rng.gen_range(0.1..2.5),
                object: 0,
            })
            .collect();
        voxel_bad += usize::from(voxelize(&pts, &ego, &grid).occupancy != common::brute_binning(&pts, &ego, &grid));
    }

    let sensor = SensorConfig {
        rays: 32,
        ..SensorConfig::default()
    };
    let mut ray_bad = 0;
    for seed in 0..INSTANCES {
        let scene = generate_scene(seed, &SceneConfig::default())?;
        let pose = scene.agents[0];
        let hits = raycast_observe(&scene, 0, &sensor);
        let mut agree = true;
        for r in 0..sensor.rays {
            let angle = pose.yaw + 2.0 * std::f64::consts::PI * r as f64 / sensor.rays as f64;
            let dir = (angle.cos(), angle.sin());
            let hit = hits.iter().find(|h| {
                let (dx, dy) = (h.x - pose.x, h.y - pose.y);
                (dx * dir.1 - dy * dir.0).abs() < 1e-6 && dx * dir.0 + dy * dir.1 > 0.0
            });
            let marched = common::ray_march(&scene, (pose.x, pose.y), dir, sensor.max_range, 0.01);
            agree &= match (hit, marched) {
                (Some(h), Some((t, i))) => {
                    let th = (h.x - pose.x).hypot(h.y - pose.y);
                    h.object == i && t >= th - 1e-9 && t - th <= 0.01 + 1e-9
                }
                (None, None) => true,
                (Some(h), None) => {
                    common::chord(&scene.objects[h.object].rect, (pose.x, pose.y), dir, sensor.max_range, 1e-3) < 0.01
                }
                (None, Some((t, _))) => t > sensor.max_range - 0.01,
            };
        }
        ray_bad += usize::from(!agree);
    }

    let ok = nms_bad + ap_bad + voxel_bad + ray_bad == 0;
    Ok(outcome(
        ok,
        format!(
            "{INSTANCES} instances each; mismatches: nms {nms_bad}, ap {ap_bad}, voxelize {voxel_bad}, raycast {ray_bad}"
        ),
    ))
}

/// The occlusion suite: three agents, 200 training and 50 test scenes that
/// each hide an object from the designated ego, 30 epochs with every agent
/// taking a turn as ego. Networks are narrower than the defaults so the
/// whole suite fits its time budget.
fn suite_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = SEEDS.to_vec();
    cfg.scene.min_agents = 3;
    cfg.scene.max_agents = 3;
    cfg.dataset.train_scenes = 200;
    cfg.dataset.test_scenes = 50;
    cfg.dataset.require_hidden_object = true;
    cfg.train.epochs = 30;
    cfg.net.encoder_channels = [8, 16];
    cfg.net.collab_hidden = 16;
    cfg.net.decoder_channels = 8;
    cfg.net.projection_dim = 32;
    cfg.net.global_hidden = 64;
    cfg.net.local_hidden = 32;
    cfg
}

struct SeedResult {
    main: Vec<EvalReport>,
    ablation: f64,
}

fn ap50(reports: &[EvalReport], mode: CollabMode, noise: f64) -> f64 {
    reports
        .iter()
        .find(|r| r.setting.mode == mode && r.setting.noise_std == noise)
        .map(|r| r.ap50)
        .expect("setting was evaluated")
}

fn run_suite() -> Result<Vec<SeedResult>> {
    let cfg = suite_config();
    let data = generate(&cfg)?;
    let mut ablation_cfg = cfg.clone();
    ablation_cfg.loss.alpha = 0.0;
    let mut out = Vec::new();
    for &seed in &SEEDS {
        let mut parts = Vec::new();
        for kind in [ModelKind::Single, ModelKind::Early, ModelKind::Intermediate] {
            let spec = ModelSpec::new(kind, cfg.net.compression_exponent, None);
            let arch = spec.architecture(&cfg)?;
            parts.push((spec.clone(), arch, train(&cfg, &spec, &data.train, seed)?.params));
        }
        let main = LoadedModels::from_parts(parts).evaluate(&cfg, &noise_settings(&cfg), &data.test, seed, None)?;

        let spec = ModelSpec::new(ModelKind::Intermediate, cfg.net.compression_exponent, Some("ablation"));
        let arch = spec.architecture(&cfg)?;
        let params = train(&ablation_cfg, &spec, &data.train, seed)?.params;
        let settings: Vec<EvalSetting> =
            eval_settings(&cfg).into_iter().filter(|s| s.mode == CollabMode::Intermediate).collect();
        let ablation = LoadedModels::from_parts(vec![(spec, arch, params)]).evaluate(
            &cfg,
            &settings,
            &data.test,
            seed,
            Some("ablation"),
        )?;
        println!(
            "  seed {seed}: none {:.4} early {:.4} late {:.4} intermediate {:.4} ablation {:.4}",
            ap50(&main, CollabMode::None, 0.0),
            ap50(&main, CollabMode::Early, 0.0),
            ap50(&main, CollabMode::Late, 0.0),
            ap50(&main, CollabMode::Intermediate, 0.0),
            ablation[0].ap50
        );
        out.push(SeedResult {
            main,
            ablation: ablation[0].ap50,
        });
    }
    Ok(out)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn trend(results: &[SeedResult]) -> Outcome {
    let m = |mode| mean(results.iter().map(|r| ap50(&r.main, mode, 0.0)));
    let (none, early, inter) = (m(CollabMode::None), m(CollabMode::Early), m(CollabMode::Intermediate));
    let ablation = mean(results.iter().map(|r| r.ablation));
    let wins = results
        .iter()
        .filter(|r| ap50(&r.main, CollabMode::Intermediate, 0.0) > ap50(&r.main, CollabMode::None, 0.0))
        .count();
    let ok = early >= inter && inter >= none && wins == results.len() && inter >= ablation;
    outcome(
        ok,
        format!(
            "mean AP@0.5 early {early:.4} >= intermediate {inter:.4} >= none {none:.4}; \
             intermediate > none on {wins}/{} seeds; ablation {ablation:.4} <= intermediate",
            results.len()
        ),
    )
}

fn noise_trend(results: &[SeedResult]) -> Outcome {
    let stds = ExperimentConfig::default().eval.noise_stds;
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in [CollabMode::Early, CollabMode::Late, CollabMode::Intermediate] {
        let curve: Vec<f64> = stds.iter().map(|&s| mean(results.iter().map(|r| ap50(&r.main, mode, s)))).collect();
        ok &= curve.windows(2).all(|w| w[1] <= w[0]);
        parts.push(format!(
            "{} {}",
            mode.name(),
            curve.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" > ")
        ));
    }
    outcome(ok, format!("noise {stds:?} m: {}", parts.join("; ")))
}

const TINY: &str = r#"
seeds = [0]
[scene]
min_agents = 3
max_agents = 3
[dataset]
train_scenes = 8
test_scenes = 4
[net]
encoder_channels = [4, 8]
collab_hidden = 4
decoder_channels = 4
projection_dim = 8
global_hidden = 8
local_hidden = 4
[train]
epochs = 2
batch_size = 2
"#;

fn run_cli(out: &Path, config: &Path, args: &[&str]) -> Result<()> {
    let status = Command::new(env!("CARGO_BIN_EXE_coperception"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("COPERCEPTION_OUT", out)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()?;
    if !status.success() {
        return Err(coperception::error::Error::contract(format!("`{}` exited with {status}", args.join(" "))));
    }
    Ok(())
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY)?;
    let mut snapshots = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        for model in ["single", "early", "intermediate"] {
            run_cli(&out, &config, &["train", "--model", model])?;
        }
        run_cli(&out, &config, &["eval"])?;
        let mut files = Vec::new();
        for e in std::fs::read_dir(out.join("metrics"))? {
            let p = e?.path();
            files.push((p.file_name().unwrap().to_owned(), std::fs::read(&p)?));
        }
        files.sort();
        snapshots.push(files);
    }
    let ok = !snapshots[0].is_empty() && snapshots[0] == snapshots[1];
    Ok(outcome(ok, format!("{} metrics files compared byte for byte", snapshots[0].len())))
}

fn main() {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= criterion(1, "bandwidth arithmetic", Some(secs(1)), bandwidth);
    all &= criterion(2, "gradient suite", Some(secs(120)), gradients);
    all &= criterion(3, "JS estimator analytics", Some(secs(300)), js_estimator);
    all &= criterion(4, "fusion, loss and local-MI identities", Some(secs(60)), identities);
    all &= criterion(5, "pair machinery", Some(secs(10)), pairs);
    all &= criterion(6, "oracle equivalences", Some(secs(120)), oracles);

    let start = Instant::now();
    let suite = run_suite();
    let elapsed = start.elapsed();
    let budget = secs(30 * 60);
    match &suite {
        Ok(results) => {
            all &= criterion(7, "end-to-end trend", None, || {
                let mut o = trend(results);
                o.passed &= elapsed <= budget;
                o.detail.push_str(&format!("; suite took {:.0}s of {}s", elapsed.as_secs_f64(), budget.as_secs()));
                Ok(o)
            });
            all &= criterion(8, "pose-noise robustness trend", None, || Ok(noise_trend(results)));
        }
        Err(e) => {
            let msg = format!("suite failed: {e}");
            all &= criterion(7, "end-to-end trend", None, || Ok(outcome(false, msg.clone())));
            all &= criterion(8, "pose-noise robustness trend", None, || Ok(outcome(false, msg.clone())));
        }
    }
    all &= criterion(9, "determinism", None, determinism);

    if !all {
        std::process::exit(1);
    }
}
