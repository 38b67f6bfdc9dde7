//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::block::BlockConfig;
use crate::error::{Error, Result};
use crate::model::{Aggregator, ModelConfig, TaskKind};
use crate::saliency::{Normalization, Strategy};
use crate::synth::SynthConfig;
use crate::trainer::OptimConfig;

/// Model family selected by the `model` key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    DeltaMil,
    Abmil,
    MeanPool,
    MaxPool,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DeltaMil => "deltamil",
            ModelKind::Abmil => "abmil",
            ModelKind::MeanPool => "meanpool",
            ModelKind::MaxPool => "maxpool",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [ModelKind::DeltaMil, ModelKind::Abmil, ModelKind::MeanPool, ModelKind::MaxPool]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?} (deltamil, abmil, meanpool, maxpool)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskKind,
    pub model_kind: ModelKind,
    /// Block and head settings; `layers` and `aggregator` apply to deltamil.
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub synth: SynthConfig,
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    /// Restrict train/eval/sweep/heatmap to these folds.
    pub folds: Option<Vec<usize>>,
    pub checkpoint: Option<PathBuf>,
    pub ratios: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub sweep_seeds: Vec<u64>,
    pub normalization: Normalization,
    pub heatmap_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            task: TaskKind::Classification,
            model_kind: ModelKind::DeltaMil,
            model: ModelConfig { in_dim: synth.feature_dim, ..Default::default() },
            optim: OptimConfig::default(),
            synth,
            manifest: None,
            out: PathBuf::from("out"),
            seed: 0,
            folds: None,
            checkpoint: None,
            ratios: vec![0.05, 0.1, 0.25, 0.5, 0.75, 1.0],
            strategies: Strategy::ALL.to_vec(),
            sweep_seeds: (0..5).collect(),
            normalization: Normalization::Percentile,
            heatmap_limit: 8,
        }
    }
}

/// Command-line overrides applied after the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub fold: Option<usize>,
    pub chunk_size: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub no_local: bool,
    pub no_gated: bool,
    pub no_delta: bool,
    pub zscore: bool,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

/// Split `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key {k:?} repeated", n + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Parse and validate. Keys not listed here are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let pairs = parse_pairs(text)?;
        let mut dropout: Option<f64> = None;
        let mut aggregator: Option<Aggregator> = None;
        for (k, v) in &pairs {
            let (k, v) = (k.as_str(), v.as_str());
            let b = &mut c.model.block;
            match k {
                "task" => c.task = TaskKind::parse(v)?,
                "model" => c.model_kind = ModelKind::parse(v)?,
                "aggregator" => aggregator = Some(Aggregator::parse(v)?),
                "d_model" => b.d_model = parse(k, v)?,
                "heads" => b.heads = parse(k, v)?,
                "head_dim" => b.head_dim = parse(k, v)?,
                "d_ff" => b.d_ff = parse(k, v)?,
                "conv_kernel" => b.conv_kernel = parse(k, v)?,
                "short_conv" => b.short_conv = parse(k, v)?,
                "chunk_size" => b.chunk_size = parse(k, v)?,
                "rms_eps" => b.rms_eps = parse(k, v)?,
                "local" => b.local = parse_bool(k, v)?,
                "gated" => b.gated = parse_bool(k, v)?,
                "delta" => b.delta = parse_bool(k, v)?,
                "layers" => c.model.layers = parse(k, v)?,
                "attn_dim" => c.model.attn_dim = parse(k, v)?,
                "zscore" => c.model.zscore = parse_bool(k, v)?,
                "n_classes" => c.synth.n_classes = parse(k, v)?,
                "n_bins" => c.model.n_bins = parse(k, v)?,
                "lr" => c.optim.lr = parse(k, v)?,
                "beta1" => c.optim.beta1 = parse(k, v)?,
                "beta2" => c.optim.beta2 = parse(k, v)?,
                "eps" => c.optim.eps = parse(k, v)?,
                "weight_decay" => c.optim.weight_decay = parse(k, v)?,
                "accumulation_steps" => c.optim.accumulation_steps = parse(k, v)?,
                "dropout" => dropout = Some(parse(k, v)?),
                "patience" => c.optim.patience = parse(k, v)?,
                "max_epochs" => c.optim.max_epochs = parse(k, v)?,
                "n_bags" => c.synth.n_bags = parse(k, v)?,
                "patches_per_bag" => c.synth.patches_per_bag = parse(k, v)?,
                "feature_dim" => c.synth.feature_dim = parse(k, v)?,
                "witness_rate" => c.synth.witness_rate = parse(k, v)?,
                "signal_strength" => c.synth.signal_strength = parse(k, v)?,
                "noise_std" => c.synth.noise_std = parse(k, v)?,
                "base_rate" => c.synth.base_rate = parse(k, v)?,
                "kappa" => c.synth.kappa = parse(k, v)?,
                "censor_rate" => c.synth.censor_rate = parse(k, v)?,
                "risk_spread" => c.synth.risk_spread = parse(k, v)?,
                "folds" => c.synth.folds = parse(k, v)?,
                "seed" => c.seed = parse(k, v)?,
                "manifest" => c.manifest = Some(PathBuf::from(v)),
                "out" => c.out = PathBuf::from(v),
                "fold" => c.folds = Some(parse_list(k, v)?),
                "checkpoint" => c.checkpoint = Some(PathBuf::from(v)),
                "ratios" => c.ratios = parse_list(k, v)?,
                "strategies" => {
                    c.strategies = v.split(',').map(|s| Strategy::parse(s.trim())).collect::<Result<_>>()?
                }
                "sweep_seeds" => c.sweep_seeds = parse_list(k, v)?,
                "normalization" => c.normalization = Normalization::parse(v)?,
                "heatmap_limit" => c.heatmap_limit = parse(k, v)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        c.optim.dropout_rate = dropout.unwrap_or(match c.task {
            TaskKind::Classification => 0.0,
            TaskKind::Survival => 0.25,
        });
        if let Some(a) = aggregator {
            c.model.aggregator = a;
        }
        c.sync();
        c.validate()?;
        Ok(c)
    }

    /// Propagate shared settings (seed, task, dimensions) into sub-configs.
    fn sync(&mut self) {
        self.model.task = self.task;
        self.model.in_dim = self.synth.feature_dim;
        self.model.n_classes = self.synth.n_classes;
        self.synth.survival = self.task == TaskKind::Survival;
        self.synth.seed = self.seed;
        self.optim.seed = self.seed;
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(f) = o.fold {
            self.folds = Some(vec![f]);
        }
        if let Some(c) = o.chunk_size {
            self.model.block.chunk_size = c;
        }
        if let Some(l) = o.layers {
            self.model.layers = l;
        }
        if let Some(h) = o.heads {
            self.model.block.heads = h;
        }
        let b = &mut self.model.block;
        b.local &= !o.no_local;
        b.gated &= !o.no_gated;
        b.delta &= !o.no_delta;
        self.model.zscore |= o.zscore;
        self.sync();
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.optim.validate()?;
        self.model_config().validate()?;
        if self.model_kind == ModelKind::DeltaMil && self.model.layers == 0 {
            return Err(Error::Config("deltamil needs layers >= 1".into()));
        }
        if let Some(fs) = &self.folds {
            if fs.is_empty() {
                return Err(Error::Config("empty fold list".into()));
            }
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::Config("ratios must lie in (0,1]".into()));
        }
        if self.ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("ratios must be strictly increasing".into()));
        }
        if self.sweep_seeds.is_empty() {
            return Err(Error::Config("sweep_seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Model configuration after applying the model family.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        match self.model_kind {
            ModelKind::DeltaMil => {}
            ModelKind::Abmil => {
                m.layers = 0;
                m.aggregator = Aggregator::Attention;
            }
            ModelKind::MeanPool => {
                m.layers = 0;
                m.aggregator = Aggregator::Mean;
            }
            ModelKind::MaxPool => {
                m.layers = 0;
                m.aggregator = Aggregator::Max;
            }
        }
        m
    }

    /// Manifest path: explicit key, else `<out>/manifest.tsv`.
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.out.join("manifest.tsv"))
    }
}

/// Serialize the model-defining keys; parsed back by [`model_from_text`].
pub fn model_to_text(m: &ModelConfig, boundaries: Option<&[f64]>) -> String {
    let b = &m.block;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("task", m.task.name().into());
    kv("in_dim", m.in_dim.to_string());
    kv("d_model", b.d_model.to_string());
    kv("heads", b.heads.to_string());
    kv("head_dim", b.head_dim.to_string());
    kv("d_ff", b.d_ff.to_string());
    kv("conv_kernel", b.conv_kernel.to_string());
    kv("short_conv", b.short_conv.to_string());
    kv("chunk_size", b.chunk_size.to_string());
    kv("rms_eps", format!("{:?}", b.rms_eps));
    kv("local", b.local.to_string());
    kv("gated", b.gated.to_string());
    kv("delta", b.delta.to_string());
    kv("layers", m.layers.to_string());
    kv("aggregator", m.aggregator.name().into());
    kv("attn_dim", m.attn_dim.to_string());
    kv("zscore", m.zscore.to_string());
    kv("n_classes", m.n_classes.to_string());
    kv("n_bins", m.n_bins.to_string());
    if let Some(bs) = boundaries {
        kv("bin_boundaries", bs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","));
    }
    s
}

pub fn model_from_text(text: &str) -> Result<(ModelConfig, Option<Vec<f64>>)> {
    let pairs = parse_pairs(text)?;
    let get = |k: &str| pairs.get(k).map(String::as_str).ok_or_else(|| Error::Config(format!("missing key {k:?}")));
    let block = BlockConfig {
        d_model: parse("d_model", get("d_model")?)?,
        heads: parse("heads", get("heads")?)?,
        head_dim: parse("head_dim", get("head_dim")?)?,
        d_ff: parse("d_ff", get("d_ff")?)?,
        conv_kernel: parse("conv_kernel", get("conv_kernel")?)?,
        short_conv: parse("short_conv", get("short_conv")?)?,
        chunk_size: parse("chunk_size", get("chunk_size")?)?,
        rms_eps: parse("rms_eps", get("rms_eps")?)?,
        local: parse_bool("local", get("local")?)?,
        gated: parse_bool("gated", get("gated")?)?,
        delta: parse_bool("delta", get("delta")?)?,
        ..Default::default()
    };
    let m = ModelConfig {
        in_dim: parse("in_dim", get("in_dim")?)?,
        block,
        layers: parse("layers", get("layers")?)?,
        aggregator: Aggregator::parse(get("aggregator")?)?,
        attn_dim: parse("attn_dim", get("attn_dim")?)?,
        zscore: parse_bool("zscore", get("zscore")?)?,
        task: TaskKind::parse(get("task")?)?,
        n_classes: parse("n_classes", get("n_classes")?)?,
        n_bins: parse("n_bins", get("n_bins")?)?,
    };
    let bounds = match pairs.get("bin_boundaries") {
        Some(v) if v.is_empty() => Some(Vec::new()),
        Some(v) => Some(parse_list("bin_boundaries", v)?),
        None => None,
    };
    m.validate()?;
    Ok((m, bounds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let text = "# reduced run\nfeature_dim = 16\nd_model = 32\nheads=2\nhead_dim = 16\nlr = 1e-3\nfold = 0,2\n";
        let mut c = RunConfig::from_text(text).unwrap();
        assert_eq!(c.model_config().in_dim, 16);
        assert_eq!(c.folds, Some(vec![0, 2]));
        assert_eq!(c.optim.dropout_rate, 0.0);
        c.apply(&Overrides { no_gated: true, layers: Some(2), seed: Some(9), ..Default::default() }).unwrap();
        assert!(!c.model.block.gated && c.model.block.local);
        assert_eq!((c.model.layers, c.optim.seed, c.synth.seed), (2, 9, 9));
    }

    #[test]
    fn survival_defaults_dropout() {
        let c = RunConfig::from_text("task = survival").unwrap();
        assert_eq!(c.optim.dropout_rate, 0.25);
        assert!(c.synth.survival);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "witness_rate = 1.5",
            "colour = red",
            "lr = fast",
            "lr = 1\nlr = 2",
            "layers = 0",
            "model = transformer",
            "accumulation_steps = 0",
            "ratios = 0.5, 0.2",
            "just a line",
        ] {
            assert!(matches!(RunConfig::from_text(bad), Err(Error::Config(_))), "{bad}");
        }
        assert!(RunConfig::from_text("model = abmil\nlayers = 0").is_ok());
    }

    #[test]
    fn model_text_round_trip() {
        let c = RunConfig::from_text("task = survival\nzscore = true\nlocal = false").unwrap();
        let m = c.model_config();
        let (back, bounds) = model_from_text(&model_to_text(&m, Some(&[1.5, 3.25]))).unwrap();
        assert_eq!(back, m);
        assert_eq!(bounds, Some(vec![1.5, 3.25]));
    }
}
