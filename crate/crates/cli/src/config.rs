//! Run configuration: TOML on disk, strict schema, command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ddss::diffusion::data::{eight_gaussians, MIXTURE_STD};
use ddss::diffusion::{NetworkConfig, NoiseSchedule, TrainConfig};
use ddss::ggdm::Family;
use ddss::samplers::StrideKind;
use ddss::search::{FeatureSpec, KernelKind, SearchConfig};
use ddss::tensorgrad::Tensor;

use crate::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory for every artifact of a command.
    pub out: PathBuf,
    /// Model checkpoint read by `search`, `sample` and `eval`.
    /// Defaults to `<out>/model.ckpt`.
    pub model: Option<PathBuf>,
    /// Benchmark data. Required by every command that touches data.
    pub dataset: Option<DatasetConfig>,
    pub schedule: ScheduleConfig,
    pub network: NetworkSection,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub plot: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            model: None,
            dataset: None,
            schedule: ScheduleConfig::default(),
            network: NetworkSection::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            plot: PlotConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    EightGaussians,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// The train, validation and test splits use `seed`, `seed + 1`, `seed + 2`.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::EightGaussians,
            train_size: 20_000,
            val_size: 4096,
            test_size: 2048,
            seed: 1,
        }
    }
}

pub struct Splits {
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
}

impl DatasetConfig {
    pub fn splits(&self) -> Splits {
        match self.kind {
            DatasetKind::EightGaussians => Splits {
                train: eight_gaussians(self.train_size, self.seed),
                val: eight_gaussians(self.val_size, self.seed + 1),
                test: eight_gaussians(self.test_size, self.seed + 2),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    Linear,
    CosineLogsnr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleName,
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub logsnr_max: f64,
    pub logsnr_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleName::Linear,
            steps: 128,
            beta_min: 1e-3,
            beta_max: 0.2,
            logsnr_max: 20.0,
            logsnr_min: -20.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let s = match self.kind {
            ScheduleName::Linear => NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max),
            ScheduleName::CosineLogsnr => NoiseSchedule::cosine_logsnr(self.steps, self.logsnr_max, self.logsnr_min),
        };
        s.map_err(|e| ConfigError(format!("schedule: {e}")).into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub hidden: usize,
    pub layers: usize,
    pub embed_dim: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let toy = NetworkConfig::toy(1);
        Self {
            hidden: toy.hidden,
            layers: toy.layers,
            embed_dim: toy.embed_dim,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    Ggdm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub sampler: SamplerKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub stride: StrideKind,
    pub eta: f64,
    /// Searched sampler checkpoint for `sampler = "ggdm"`.
    /// Defaults to `<out>/sampler_final.ckpt`.
    pub params: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    /// Also write every intermediate state.
    pub trajectory: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ggdm,
            k: 5,
            stride: StrideKind::Linear,
            eta: 0.0,
            params: None,
            n: 2048,
            seed: 0,
            trajectory: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `ddpm`, `ddim`, or `NAME=PATH` for a searched sampler checkpoint.
    /// Repeating a name with different paths adds more `K` values.
    pub samplers: Vec<String>,
    #[serde(rename = "Ks")]
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_eval: usize,
    pub kernel: KernelKind,
    pub features: FeatureSpec,
    pub eta: f64,
    pub stride: StrideKind,
    pub coverage_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samplers: vec!["ddpm".into(), "ddim".into()],
            ks: vec![5],
            seeds: vec![0, 1, 2, 3, 4],
            n_eval: 2048,
            kernel: KernelKind::Linear,
            features: FeatureSpec::default(),
            eta: 0.0,
            stride: StrideKind::Linear,
            coverage_radius: 3.0 * MIXTURE_STD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    /// Sample CSVs, one panel each.
    pub inputs: Vec<PathBuf>,
    /// Reference panel; defaults to the dataset's test split.
    pub real: Option<PathBuf>,
    pub panel_size: f64,
    /// Half-width of the square data window shown in each panel.
    pub extent: f64,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            real: None,
            panel_size: 240.0,
            extent: 6.0,
        }
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of sampling steps.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Search family: ddim, vars, ggdm or ggdm_pred.
    #[arg(long)]
    pub family: Option<Family>,
    /// Also learn the timesteps.
    #[arg(long)]
    pub time: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// linear or cubic.
    #[arg(long)]
    pub kernel: Option<KernelKind>,
    /// identity, rff, rff:DIM or file:PATH.
    #[arg(long)]
    pub features: Option<FeatureSpec>,
    /// linear, quadratic or learned.
    #[arg(long)]
    pub stride: Option<StrideKind>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Search,
    Sample,
    Eval,
    Plot,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Search => "search",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Plot => "plot",
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ConfigError(format!("invalid configuration: {e}")).into())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn resolve(overrides: &Overrides, command: Command) -> Result<Self> {
        Self::resolve_with(overrides, command, |_| {})
    }

    /// Like [`RunConfig::resolve`], with command-specific flags applied by
    /// `extra` before validation.
    pub fn resolve_with(overrides: &Overrides, command: Command, extra: impl FnOnce(&mut Self)) -> Result<Self> {
        let mut c = match &overrides.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        c.apply(overrides, command);
        extra(&mut c);
        c.validate(command)?;
        Ok(c)
    }

    fn apply(&mut self, o: &Overrides, command: Command) {
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(m) = &o.model {
            self.model = Some(m.clone());
        }
        if let Some(k) = o.k {
            self.search.k = k;
            self.sample.k = k;
            self.eval.ks = vec![k];
        }
        if let Some(f) = o.family {
            self.search.sampler.family = f;
        }
        if o.time {
            self.search.sampler.time = true;
        }
        if let Some(steps) = o.steps {
            match command {
                Command::Train => self.train.steps = steps,
                _ => self.search.steps = steps,
            }
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.search.seed = seed;
            self.sample.seed = seed;
            self.eval.seeds = vec![seed];
        }
        if let Some(k) = o.kernel {
            self.search.kernel = k;
            self.eval.kernel = k;
        }
        if let Some(f) = &o.features {
            self.search.features = f.clone();
            self.eval.features = f.clone();
        }
        if let Some(s) = o.stride {
            self.search.sampler.stride = s;
            self.sample.stride = s;
            self.eval.stride = s;
        }
        if let Some(eta) = o.eta {
            self.sample.eta = eta;
            self.eval.eta = eta;
        }
    }

    fn validate(&self, command: Command) -> Result<()> {
        let needs_data = !matches!(command, Command::Sample) && !(command == Command::Plot && self.plot.real.is_some());
        if needs_data && self.dataset.is_none() {
            return Err(ConfigError(format!(
                "the `{}` command needs the `dataset` key (a [dataset] table)",
                command.name()
            ))
            .into());
        }
        let field = |name: &str, e: ddss::Error| ConfigError(format!("{name}: {e}"));
        self.train.validate().map_err(|e| field("train", e))?;
        self.search.validate().map_err(|e| field("search", e))?;
        if self.schedule.steps == 0 {
            return Err(ConfigError("schedule.steps must be positive".into()).into());
        }
        if self.sample.k == 0 || self.sample.n == 0 {
            return Err(ConfigError("sample.K and sample.n must be positive".into()).into());
        }
        if !(self.sample.eta >= 0.0 && self.eval.eta >= 0.0) {
            return Err(ConfigError("eta must be non-negative".into()).into());
        }
        if self.eval.ks.is_empty() || self.eval.seeds.is_empty() || self.eval.samplers.is_empty() {
            return Err(ConfigError("eval.Ks, eval.seeds and eval.samplers must be non-empty".into()).into());
        }
        if self.eval.n_eval < 2 || self.eval.n_eval > 2048 {
            return Err(ConfigError(format!("eval.n_eval must be in 2..=2048, got {}", self.eval.n_eval)).into());
        }
        if let Some(d) = &self.dataset {
            if d.train_size < 2 || (command == Command::Search && d.val_size < self.search.val_size) {
                return Err(ConfigError(format!(
                    "dataset.val_size ({}) must cover search.val_size ({}) and dataset.train_size must be >= 2",
                    d.val_size, self.search.val_size
                ))
                .into());
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> &DatasetConfig {
        self.dataset.as_ref().expect("validated")
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            data_dim: 2,
            hidden: self.network.hidden,
            layers: self.network.layers,
            embed_dim: self.network.embed_dim,
            t_max: self.schedule.steps,
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out.join("model.ckpt"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the resolved configuration")
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Writes `<out>/<command>.resolved.toml`.
    pub fn write_resolved(&self, command: Command) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(format!("{}.resolved.toml", command.name()));
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig {
            dataset: Some(DatasetConfig::default()),
            ..RunConfig::default()
        };
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::from_toml("[search]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn partial_tables_fill_in_defaults() {
        let c = RunConfig::from_toml("[search]\nK = 7\n[search.sampler]\nfamily = \"vars\"\n").unwrap();
        assert_eq!(c.search.k, 7);
        assert_eq!(c.search.sampler.family, Family::Vars);
        assert!(c.search.sampler.time);
        assert_eq!(c.search.batch_size, 512);
    }

    #[test]
    fn overrides_route_by_command() {
        let o = Overrides {
            steps: Some(3),
            k: Some(4),
            seed: Some(9),
            ..Overrides::default()
        };
        let mut c = RunConfig::default();
        c.apply(&o, Command::Train);
        assert_eq!(c.train.steps, 3);
        assert_eq!(c.search.steps, SearchConfig::default().steps);
        c.apply(&o, Command::Search);
        assert_eq!((c.search.steps, c.search.k, c.eval.ks.clone()), (3, 4, vec![4]));
        assert_eq!(c.eval.seeds, vec![9]);
    }

    #[test]
    fn missing_dataset_names_the_key() {
        let err = RunConfig::default().validate(Command::Train).unwrap_err();
        assert!(err.to_string().contains("`dataset`"));
        RunConfig::default().validate(Command::Sample).unwrap();
    }
}
