use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_manifest, MultiSourceTask, SyntheticSpec};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Training recipes compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One branch per source, both alignment coefficients zero.
    NoAdapt,
    /// One single-branch model per source; the best target accuracy is reported.
    SingleBest,
    /// Sources pooled into one branch aligned against the target.
    SourceCombine,
    /// Distribution alignment only.
    MfsanMmd,
    /// Classifier alignment only.
    MfsanDisc,
    /// Both alignment terms.
    Mfsan,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::NoAdapt,
        Method::SingleBest,
        Method::SourceCombine,
        Method::MfsanMmd,
        Method::MfsanDisc,
        Method::Mfsan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoAdapt => "no_adapt",
            Method::SingleBest => "single_best",
            Method::SourceCombine => "source_combine",
            Method::MfsanMmd => "mfsan_mmd",
            Method::MfsanDisc => "mfsan_disc",
            Method::Mfsan => "mfsan",
        }
    }

    /// `base` with the coefficients this method switches off set to zero.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Method::NoAdapt => {
                c.lambda_base = 0.0;
                c.gamma_base = 0.0;
            }
            Method::MfsanMmd => c.gamma_base = 0.0,
            Method::MfsanDisc => c.lambda_base = 0.0,
            Method::SingleBest | Method::SourceCombine | Method::Mfsan => {}
        }
        c
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Validation(vec![format!(
                    "unknown method {s:?}; expected one of {}",
                    names.join(", ")
                )])
            })
    }
}

/// Where a task comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Synthetic(SyntheticSpec),
    Manifest(PathBuf),
}

impl Default for TaskSource {
    fn default() -> Self {
        TaskSource::Synthetic(SyntheticSpec::desk_default())
    }
}

impl TaskSource {
    /// Loads the task. A synthetic task drawn with `data_seed` when given.
    pub fn load(&self, data_seed: Option<u64>) -> Result<MultiSourceTask> {
        match self {
            TaskSource::Synthetic(spec) => {
                let mut spec = spec.clone();
                if let Some(s) = data_seed {
                    spec.seed = s;
                }
                generate_synthetic(&spec)
            }
            TaskSource::Manifest(p) => load_manifest(p),
        }
    }

    fn resolve_relative(&mut self, base: &Path) {
        if let TaskSource::Manifest(p) = self {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Every listed method on every seed.
    #[default]
    Run,
    /// `mfsan_mmd` against `mfsan`, per classifier.
    Table4,
    /// `mfsan` over `lambda_values`, with gamma tied to lambda.
    SweepLambda,
    /// Accuracy-vs-iteration series of `mfsan` and `mfsan_mmd`.
    Convergence,
}

/// Default coefficient grid for the sweep, 0.01 to 2.
pub const DEFAULT_LAMBDA_GRID: [f64; 8] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0];

/// One experiment file.
///
/// ```toml
/// kind = "run"
/// methods = ["no_adapt", "mfsan"]
/// seeds = [0, 1, 2]
/// output_dir = "out"
///
/// [train]
/// iterations = 1000
///
/// [task.synthetic]
/// num_classes = 4
/// # ... or: task = { manifest = "data/manifest.toml" }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub methods: Vec<Method>,
    pub task: TaskSource,
    /// Redraw a synthetic task from each run seed instead of its own seed.
    pub vary_task_with_seed: bool,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub lambda_values: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Run,
            methods: vec![Method::Mfsan],
            task: TaskSource::default(),
            vary_task_with_seed: true,
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            lambda_values: DEFAULT_LAMBDA_GRID.to_vec(),
            output_dir: PathBuf::from("experiment_out"),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("seeds must list at least one seed".to_string());
        }
        if self.kind == ExperimentKind::Run && self.methods.is_empty() {
            errs.push("methods must list at least one method".to_string());
        }
        if self.kind == ExperimentKind::SweepLambda {
            if self.lambda_values.is_empty() {
                errs.push("lambda_values must not be empty".to_string());
            }
            if let Some(v) = self.lambda_values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                errs.push(format!("lambda_values must be positive, got {v}"));
            }
        }
        if let TaskSource::Synthetic(s) = &self.task {
            if let Err(Error::Validation(e)) = s.validate() {
                errs.extend(e.into_iter().map(|m| format!("task.synthetic: {m}")));
            }
        }
        if let Err(Error::Validation(e)) = self.train.validate() {
            errs.extend(e.into_iter().map(|m| format!("train: {m}")));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Parses a TOML experiment file; relative manifest and output paths are
    /// taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Validation(vec![format!("experiment spec {} not found", path.display())])
            } else {
                Error::Io(e)
            }
        })?;
        let mut spec: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e
                .span()
                .map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            msg: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.task.resolve_relative(base);
        if spec.output_dir.is_relative() {
            spec.output_dir = base.join(&spec.output_dir);
        }
        Ok(spec)
    }

    /// Data seed for run `seed`.
    pub fn data_seed(&self, seed: u64) -> Option<u64> {
        self.vary_task_with_seed.then_some(seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("dctn".parse::<Method>().is_err());
    }

    #[test]
    fn method_coefficients() {
        let base = TrainConfig::default();
        let c = Method::MfsanMmd.train_config(&base);
        assert_eq!((c.lambda_base, c.gamma_base), (0.5, 0.0));
        let c = Method::MfsanDisc.train_config(&base);
        assert_eq!((c.lambda_base, c.gamma_base), (0.0, 0.5));
        let c = Method::NoAdapt.train_config(&base);
        assert_eq!((c.lambda_base, c.gamma_base), (0.0, 0.0));
    }

    #[test]
    fn spec_file_parses_with_partial_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.toml");
        std::fs::write(
            &p,
            "kind = \"sweep_lambda\"\nseeds = [3]\noutput_dir = \"o\"\nlambda_values = [0.5]\n\
             [train]\niterations = 7\n[task]\nmanifest = \"m.toml\"\n",
        )
        .unwrap();
        let s = ExperimentSpec::from_file(&p).unwrap();
        assert_eq!(s.kind, ExperimentKind::SweepLambda);
        assert_eq!(s.train.iterations, 7);
        assert_eq!(s.train.batch_size, 32);
        assert_eq!(s.task, TaskSource::Manifest(dir.path().join("m.toml")));
        assert_eq!(s.output_dir, dir.path().join("o"));
        s.validate().unwrap();
    }

    #[test]
    fn empty_seed_list_rejected() {
        let s = ExperimentSpec {
            seeds: vec![],
            ..ExperimentSpec::default()
        };
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
    }
}
