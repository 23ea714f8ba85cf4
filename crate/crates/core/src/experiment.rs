//! Runs built from an [`ExperimentConfig`]: data generation, training,
//! evaluation, sweeps and heatmap export, with deterministic artifact names
//! under the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::dataset::{generate_dataset, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{
    believed_poses, run_benchmark, write_sweep_csv, BenchmarkEntry, CollabMode, EvalReport, EvalSetting, Pipeline,
};
use crate::params::ParamSet;
use crate::perception::{write_heatmap_csv, Architecture, NetConfig};
use crate::scene::{write_bev, write_scene_json, SceneSample};
use crate::trainer::{EpochRecord, ModelKind, TrainJob, TrainOutcome};

/// A trained model as identified on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Only meaningful for [`ModelKind::Intermediate`].
    pub compression_exponent: u32,
    /// Distinguishes variants of the same kind, e.g. an ablation.
    pub tag: Option<String>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, compression_exponent: u32, tag: Option<&str>) -> Self {
        Self {
            kind,
            compression_exponent: if kind == ModelKind::Intermediate { compression_exponent } else { 0 },
            tag: tag.map(str::to_string),
        }
    }

    /// The model a collaboration mode runs on. The tag only applies to the
    /// fusion model.
    pub fn for_mode(mode: CollabMode, compression_exponent: u32, tag: Option<&str>) -> Self {
        match mode {
            CollabMode::None | CollabMode::Late => Self::new(ModelKind::Single, 0, None),
            CollabMode::Early => Self::new(ModelKind::Early, 0, None),
            CollabMode::Intermediate => Self::new(ModelKind::Intermediate, compression_exponent, tag),
        }
    }

    /// `single`, `early`, `intermediate-r32-ablation`, ...
    pub fn stem(&self) -> String {
        let mut s = self.kind.name().to_string();
        if self.kind == ModelKind::Intermediate {
            s += &format!("-r{}", 1u64 << self.compression_exponent);
        }
        if let Some(tag) = &self.tag {
            s += "-";
            s += tag;
        }
        s
    }

    pub fn architecture(&self, config: &ExperimentConfig) -> Result<Architecture> {
        let net = NetConfig {
            compression_exponent: self.compression_exponent,
            ..config.net.clone()
        };
        Architecture::new(net, config.grid.clone())
    }
}

/// Tags end up in file names.
pub fn validate_tag(tag: &str) -> Result<()> {
    if tag.is_empty() || !tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(Error::config("tag", format!("`{tag}` must be nonempty and use only [A-Za-z0-9_]")));
    }
    Ok(())
}

/// Artifact paths below the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data_dir(&self, split: &str) -> PathBuf {
        self.root.join("data").join(split)
    }

    pub fn checkpoint(&self, model: &ModelSpec, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}-seed{seed}.ckpt", model.stem()))
    }

    pub fn train_log(&self, model: &ModelSpec, seed: u64) -> PathBuf {
        self.root.join("metrics").join(format!("train-{}-seed{seed}.csv", model.stem()))
    }

    /// Sweep table and JSON summary of one evaluation run.
    pub fn report(&self, kind: &str, seed: u64, tag: Option<&str>) -> (PathBuf, PathBuf) {
        let stem = match tag {
            Some(t) => format!("{kind}-{t}-seed{seed}"),
            None => format!("{kind}-seed{seed}"),
        };
        let dir = self.root.join("metrics");
        (dir.join(format!("{stem}.csv")), dir.join(format!("{stem}.json")))
    }

    pub fn heatmap(&self, model: &ModelSpec, seed: u64, scene: u64, ego: usize, sender: usize) -> PathBuf {
        self.root.join("heatmaps").join(format!(
            "{}-seed{seed}-scene{scene}-ego{ego}-sender{sender}.csv",
            model.stem()
        ))
    }
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn generate(config: &ExperimentConfig) -> Result<Dataset> {
    generate_dataset(&SplitSpec {
        scene: &config.scene,
        sensor: &config.sensor,
        grid: &config.grid,
        dataset: &config.dataset,
    })
}

/// Scene JSON plus one BEV file per agent for every sample of both splits.
pub fn export_dataset(layout: &Layout, data: &Dataset) -> Result<usize> {
    let mut files = 0;
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        let dir = layout.data_dir(split);
        for s in samples.iter() {
            let id = s.scene.id;
            let mut buf = Vec::new();
            write_scene_json(&s.scene, &mut buf)?;
            write_atomic(&dir.join(format!("scene{id}.json")), &buf)?;
            for (j, bev) in s.bev.iter().enumerate() {
                let mut buf = Vec::new();
                write_bev(bev, &mut buf)?;
                write_atomic(&dir.join(format!("scene{id}-agent{j}.bev")), &buf)?;
            }
            files += 1 + s.bev.len();
        }
    }
    Ok(files)
}

pub fn train(config: &ExperimentConfig, model: &ModelSpec, data: &[SceneSample], seed: u64) -> Result<TrainOutcome> {
    let arch = model.architecture(config)?;
    TrainJob {
        arch: &arch,
        kind: model.kind,
        train: &config.train,
        loss: &config.loss,
        optim: &config.optim,
    }
    .run(data, seed)
}

/// Training log without wall-clock times, so reruns are byte-identical.
pub fn train_log_csv(log: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(format!("train log: {e}"));
    w.write_record(["epoch", "cls", "reg", "gmi", "lmi", "mi", "total", "lr_multiplier"])
        .map_err(fail)?;
    for r in log {
        let l = &r.loss;
        let row = [r.epoch as f64, l.cls, l.reg, l.gmi, l.lmi, l.mi, l.total, r.lr_multiplier];
        let mut fields: Vec<String> = row.iter().map(f64::to_string).collect();
        fields[0] = r.epoch.to_string();
        w.write_record(&fields).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("train log: {e}")))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    params.write_checkpoint(&mut buf)?;
    write_atomic(path, &buf)
}

/// Reads a checkpoint and checks it against the layout of `arch`.
pub fn load_checkpoint(path: &Path, arch: &Architecture, what: &str) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what: what.to_string(),
            path: path.to_path_buf(),
        },
        _ => e.into(),
    })?;
    let params = ParamSet::read_checkpoint(bytes.as_slice())?;
    arch.init_params(0)?.check_layout(&params)?;
    Ok(params)
}

/// Loaded models for a set of evaluation settings.
pub struct LoadedModels {
    models: Vec<(ModelSpec, Architecture, ParamSet)>,
}

impl LoadedModels {
    /// Loads every checkpoint the settings need before anything is
    /// evaluated, failing on the first missing one.
    pub fn load(
        config: &ExperimentConfig,
        layout: &Layout,
        settings: &[EvalSetting],
        seed: u64,
        tag: Option<&str>,
    ) -> Result<Self> {
        let mut models: Vec<(ModelSpec, Architecture, ParamSet)> = Vec::new();
        for s in settings {
            let spec = ModelSpec::for_mode(s.mode, s.compression_exponent, tag);
            if models.iter().any(|(m, _, _)| *m == spec) {
                continue;
            }
            let arch = spec.architecture(config)?;
            let what = format!("checkpoint for mode `{}` (seed {seed})", s.mode);
            let params = load_checkpoint(&layout.checkpoint(&spec, seed), &arch, &what)?;
            models.push((spec, arch, params));
        }
        Ok(Self { models })
    }

    /// In-memory models, e.g. straight from training.
    pub fn from_parts(models: Vec<(ModelSpec, Architecture, ParamSet)>) -> Self {
        Self { models }
    }

    pub fn get(&self, spec: &ModelSpec) -> Option<(&Architecture, &ParamSet)> {
        self.models.iter().find(|(m, _, _)| m == spec).map(|(_, a, p)| (a, p))
    }

    pub fn evaluate(
        &self,
        config: &ExperimentConfig,
        settings: &[EvalSetting],
        test: &[SceneSample],
        seed: u64,
        tag: Option<&str>,
    ) -> Result<Vec<EvalReport>> {
        let mut entries = Vec::with_capacity(settings.len());
        for s in settings {
            let spec = ModelSpec::for_mode(s.mode, s.compression_exponent, tag);
            let (arch, params) = self.get(&spec).ok_or_else(|| Error::Missing {
                what: format!("model `{}` for mode `{}` (seed {seed})", spec.stem(), s.mode),
                path: PathBuf::new(),
            })?;
            entries.push(BenchmarkEntry {
                label: s.mode.name().to_string(),
                setting: *s,
                seed,
                arch,
                params: Some(params),
            });
        }
        run_benchmark(&entries, test, &config.eval)
    }
}

/// Every configured mode at the configured compression and no noise.
pub fn eval_settings(config: &ExperimentConfig) -> Vec<EvalSetting> {
    config
        .eval
        .modes
        .iter()
        .map(|&mode| EvalSetting {
            mode,
            compression_exponent: if mode == CollabMode::Intermediate { config.net.compression_exponent } else { 0 },
            noise_std: 0.0,
        })
        .collect()
}

/// Fusion model at every sweep ratio, no noise.
pub fn compression_settings(config: &ExperimentConfig) -> Vec<EvalSetting> {
    config
        .sweep
        .compression_exponents
        .iter()
        .map(|&n| EvalSetting {
            mode: CollabMode::Intermediate,
            compression_exponent: n,
            noise_std: 0.0,
        })
        .collect()
}

/// Every configured mode at every configured noise level.
pub fn noise_settings(config: &ExperimentConfig) -> Vec<EvalSetting> {
    let mut out = Vec::new();
    for &std in &config.eval.noise_stds {
        for s in eval_settings(config) {
            out.push(EvalSetting { noise_std: std, ..s });
        }
    }
    out
}

/// Sweep table and pretty JSON of `reports`.
pub fn render_reports(reports: &[EvalReport]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut csv = Vec::new();
    write_sweep_csv(reports, &mut csv)?;
    let mut json = serde_json::to_vec_pretty(reports)?;
    json.push(b'\n');
    Ok((csv, json))
}

/// Fusion weight maps of one test frame, one CSV per sender. Returns the
/// written paths.
pub fn export_heatmaps(
    config: &ExperimentConfig,
    layout: &Layout,
    models: &LoadedModels,
    spec: &ModelSpec,
    sample: &SceneSample,
    ego: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let (arch, params) = models.get(spec).ok_or_else(|| Error::contract("export_heatmaps: model not loaded"))?;
    if ego >= sample.agent_count() {
        return Err(Error::config("ego", format!("scene {} has {} agents", sample.scene.id, sample.agent_count())));
    }
    let pipeline = Pipeline {
        arch,
        params,
        detect: &config.eval.detect,
    };
    let poses = believed_poses(sample, ego, 0.0, config.eval.noise_seed);
    let out = pipeline.run_intermediate(sample, ego, &poses)?;
    let mut written = Vec::new();
    for (sender, w) in &out.weights {
        let mut buf = Vec::new();
        write_heatmap_csv(w, &mut buf)?;
        let path = layout.heatmap(spec, seed, sample.scene.id, ego, *sender);
        write_atomic(&path, &buf)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_embed_kind_ratio_and_tag() {
        assert_eq!(ModelSpec::for_mode(CollabMode::Late, 5, Some("x")).stem(), "single");
        assert_eq!(ModelSpec::for_mode(CollabMode::Early, 5, None).stem(), "early");
        assert_eq!(ModelSpec::for_mode(CollabMode::Intermediate, 5, None).stem(), "intermediate-r32");
        assert_eq!(
            ModelSpec::for_mode(CollabMode::Intermediate, 0, Some("ablation")).stem(),
            "intermediate-r1-ablation"
        );
    }

    #[test]
    fn tags_are_file_name_safe() {
        assert!(validate_tag("alpha_0").is_ok());
        assert!(validate_tag("../x").is_err());
        assert!(validate_tag("").is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn missing_checkpoint_names_path() {
        let cfg = ExperimentConfig::default();
        let layout = Layout::new("/nonexistent-root");
        let settings = eval_settings(&cfg);
        match LoadedModels::load(&cfg, &layout, &settings, 3, None) {
            Err(Error::Missing { path, .. }) => assert!(path.ends_with("single-seed3.ckpt")),
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn sweep_settings_cover_ratios_and_noise() {
        let cfg = ExperimentConfig::default();
        assert_eq!(compression_settings(&cfg).len(), 9);
        assert_eq!(noise_settings(&cfg).len(), 12);
    }
}
