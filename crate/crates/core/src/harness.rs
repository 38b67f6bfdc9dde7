//! Experiment commands behind the CLI. Every command validates its
//! configuration before touching the filesystem and writes only under
//! `run.out`. Output files carry no timestamps, so two runs with the same
//! configuration produce byte-identical trees.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::BlockConfig;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grad::finite_diff_check;
use crate::locality::Coord;
use crate::metrics::{MetricsReport, Summary};
use crate::model::{forward_tape, loss_tape, Model, ModelConfig, PatchBag, SurvivalHead, Target, TaskKind};
use crate::par::{self, Exec};
use crate::saliency::{self, RetentionCurve};
use crate::synth::{self, Manifest, ManifestRow};
use crate::trainer::{self, Evaluation, TrainOutput};
use crate::NumArray;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Per-fold seed; fold 0 uses the run seed itself.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn checkpoint_path(run: &RunConfig, fold: usize) -> PathBuf {
    run.checkpoint.as_deref().unwrap_or(&run.out).join(format!("fold{fold}.ckpt"))
}

/// Manifest and bags for commands that consume a dataset.
pub struct Dataset {
    pub manifest: Manifest,
    pub bags: Vec<PatchBag>,
}

impl Dataset {
    pub fn load(run: &RunConfig, exec: Exec) -> Result<Self> {
        let manifest = synth::load_manifest(&run.manifest_path())?;
        let bags = manifest.load_bags(exec)?;
        let want_survival = run.task == TaskKind::Survival;
        if let Some(b) = bags.iter().find(|b| matches!(b.target, Target::Survival { .. }) != want_survival) {
            return Err(Error::Manifest(format!("bag {} does not match task {}", b.id, run.task.name())));
        }
        Ok(Self { manifest, bags })
    }

    pub fn folds(&self, run: &RunConfig) -> Result<Vec<usize>> {
        let all: Vec<usize> = (0..self.manifest.n_folds).collect();
        let folds = run.folds.clone().unwrap_or(all);
        if let Some(&k) = folds.iter().find(|&&k| k >= self.manifest.n_folds) {
            return Err(Error::Config(format!("fold {k} out of range (manifest has {})", self.manifest.n_folds)));
        }
        Ok(folds)
    }

    fn pick(&self, idx: &[usize]) -> Vec<PatchBag> {
        idx.iter().map(|&i| self.bags[i].clone()).collect()
    }

    /// `(train, val, test)` bags of fold `k`.
    pub fn split(&self, k: usize) -> Result<(Vec<PatchBag>, Vec<PatchBag>, Vec<PatchBag>)> {
        let s = self.manifest.split(k)?;
        Ok((self.pick(&s.train), self.pick(&s.val), self.pick(&s.test)))
    }
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub n_bags: usize,
}

/// Write `out/bags/*.dmb` and `out/manifest.tsv`.
pub fn cmd_synth(run: &RunConfig, exec: Exec) -> Result<SynthOutput> {
    run.validate()?;
    let bags = synth::generate_dataset(&run.synth, exec)?;
    let dir = run.out.join("bags");
    mkdir(&dir)?;
    let mut rows = Vec::with_capacity(bags.len());
    for (i, bag) in bags.iter().enumerate() {
        let rel = PathBuf::from("bags").join(format!("{}.dmb", bag.id));
        synth::write_bag(&run.out.join(&rel), bag)?;
        let (label, time, event) = match bag.target {
            Target::Class(c) => (Some(c), None, None),
            Target::Survival { time, event } => (None, Some(time), Some(event)),
        };
        rows.push(ManifestRow { path: rel, label, time, event, fold: run.synth.fold_of(i) });
    }
    let manifest = run.out.join("manifest.tsv");
    write(&manifest, synth::format_manifest(&rows))?;
    Ok(SynthOutput { manifest, n_bags: bags.len() })
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub train: TrainOutput,
    pub test: Evaluation,
}

/// Untrained model for fold `k`, with survival bins fitted on `train`.
pub fn init_model(config: &ModelConfig, seed: u64, fold: usize, train: &[PatchBag]) -> Result<Model> {
    let model = Model::new(config.clone(), fold_seed(seed, fold))?;
    if config.task != TaskKind::Survival {
        return Ok(model);
    }
    let records: Vec<(f64, bool)> = train
        .iter()
        .filter_map(|b| match b.target {
            Target::Survival { time, event } => Some((time, event)),
            Target::Class(_) => None,
        })
        .collect();
    model.with_survival(SurvivalHead::from_times(&records, config.n_bins)?)
}

pub fn train_fold(run: &RunConfig, data: &Dataset, k: usize, exec: Exec) -> Result<FoldResult> {
    let (train, val, test) = data.split(k)?;
    let model = init_model(&run.model_config(), run.seed, k, &train)?;
    let optim = trainer::OptimConfig { seed: fold_seed(run.seed, k), ..run.optim.clone() };
    let out = trainer::train(model, &train, &val, &optim, exec)?;
    let test = trainer::evaluate(&out.model, &test, exec)?;
    Ok(FoldResult { fold: k, train: out, test })
}

fn fold_log(r: &FoldResult) -> String {
    let mut s = String::new();
    for e in &r.train.log {
        let _ = writeln!(s, "{}", e.line());
    }
    let _ = writeln!(s, "best_epoch {}\tbest_val {:.6}", r.train.best_epoch, r.train.best_metric);
    s
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub folds: Vec<FoldResult>,
    pub report: MetricsReport,
}

/// Cross-validated training. Folds run concurrently; each writes
/// `fold{k}.ckpt`, `fold{k}.txt` and `fold{k}.log`, and the summary goes to
/// `report.txt`.
pub fn cmd_train(run: &RunConfig, exec: Exec) -> Result<TrainSummary> {
    run.validate()?;
    let data = Dataset::load(run, exec)?;
    let folds = data.folds(run)?;
    mkdir(&run.out)?;
    let results = par::map(exec, &folds, |&k| train_fold(run, &data, k, exec)).into_iter().collect::<Result<Vec<_>>>()?;
    for r in &results {
        checkpoint::save(&run.out.join(format!("fold{}.ckpt", r.fold)), &r.train.model)?;
        write(&run.out.join(format!("fold{}.log", r.fold)), fold_log(r))?;
    }
    let report = MetricsReport::from_folds(results.iter().map(|r| r.test.fold_metrics(r.fold)).collect());
    write(&run.out.join("report.txt"), report.render())?;
    Ok(TrainSummary { folds: results, report })
}

// ---------------------------------------------------------------- eval

/// Test-fold metrics of saved checkpoints, written to `eval.txt`.
pub fn cmd_eval(run: &RunConfig, exec: Exec) -> Result<MetricsReport> {
    run.validate()?;
    let data = Dataset::load(run, exec)?;
    let folds = data.folds(run)?;
    let models = folds.iter().map(|&k| checkpoint::load(&checkpoint_path(run, k))).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (&k, model) in folds.iter().zip(&models) {
        let (_, _, test) = data.split(k)?;
        rows.push(trainer::evaluate(model, &test, exec)?.fold_metrics(k));
    }
    let report = MetricsReport::from_folds(rows);
    mkdir(&run.out)?;
    write(&run.out.join("eval.txt"), report.render())?;
    Ok(report)
}

// ---------------------------------------------------------------- ablate

pub const ABLATIONS: [&str; 4] = ["no_local", "no_gated", "no_delta", "full"];

/// `run` with the named component switched off (all on for `full`).
pub fn ablation_variant(run: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut v = run.clone();
    let b: &mut BlockConfig = &mut v.model.block;
    (b.local, b.gated, b.delta) = (true, true, true);
    match name {
        "no_local" => b.local = false,
        "no_gated" => b.gated = false,
        "no_delta" => b.delta = false,
        "full" => {}
        other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
    }
    v.out = run.out.join("ablate").join(name);
    if v.manifest.is_none() {
        v.manifest = Some(run.manifest_path());
    }
    v.validate()?;
    Ok(v)
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<(String, MetricsReport)>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let cell = |s: Option<Summary>| s.map_or_else(|| "-".to_string(), |x| x.to_string());
        let mut s = String::from("variant\tacc\tauc\tc_index\n");
        for (name, r) in &self.rows {
            let _ = writeln!(s, "{name}\t{}\t{}\t{}", cell(r.acc), cell(r.auc), cell(r.c_index));
        }
        s
    }
}

/// Train one model per ablation row under `out/ablate/<row>/` and write the
/// table to `ablation.txt`.
pub fn cmd_ablate(run: &RunConfig, exec: Exec) -> Result<AblationTable> {
    run.validate()?;
    let variants = ABLATIONS.iter().map(|n| ablation_variant(run, n)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (name, v) in ABLATIONS.iter().zip(&variants) {
        log::info!("ablation {name}");
        rows.push((name.to_string(), cmd_train(v, exec)?.report));
    }
    let table = AblationTable { rows };
    write(&run.out.join("ablation.txt"), table.render())?;
    Ok(table)
}

// ---------------------------------------------------------------- sweep

/// Retention curves on the test folds of saved checkpoints, averaged over
/// folds, written to `sweep.tsv`.
pub fn cmd_sweep(run: &RunConfig, exec: Exec) -> Result<Vec<RetentionCurve>> {
    run.validate()?;
    if run.task != TaskKind::Classification {
        return Err(Error::Config("sweep needs task = classification".into()));
    }
    let data = Dataset::load(run, exec)?;
    let folds = data.folds(run)?;
    let models = folds.iter().map(|&k| checkpoint::load(&checkpoint_path(run, k))).collect::<Result<Vec<_>>>()?;
    let mut curves = Vec::new();
    for &strategy in &run.strategies {
        let mut acc = vec![0.0; run.ratios.len()];
        let mut seeds = Vec::new();
        for (&k, model) in folds.iter().zip(&models) {
            let (_, _, test) = data.split(k)?;
            let c = saliency::sweep(model, &test, strategy, &run.ratios, &run.sweep_seeds, exec)?;
            for (a, (_, m)) in acc.iter_mut().zip(&c.points) {
                *a += m / folds.len() as f64;
            }
            seeds = c.seeds;
        }
        let points = run.ratios.iter().copied().zip(acc).collect();
        curves.push(RetentionCurve { strategy, points, seeds });
    }
    mkdir(&run.out)?;
    write(&run.out.join("sweep.tsv"), saliency::render_curves(&curves))?;
    Ok(curves)
}

// ---------------------------------------------------------------- heatmap

#[derive(Clone, Debug)]
pub struct HeatmapOutput {
    pub paths: Vec<PathBuf>,
    /// Mean attention percentile of ground-truth witnesses, per bag that
    /// has any.
    pub witness_percentiles: Vec<(String, f64)>,
}

/// Attention heatmaps of the first `heatmap_limit` test bags of the first
/// selected fold, as `out/heatmaps/<bag>.pgm`.
pub fn cmd_heatmap(run: &RunConfig, exec: Exec) -> Result<HeatmapOutput> {
    run.validate()?;
    let data = Dataset::load(run, exec)?;
    let k = data.folds(run)?[0];
    let model = checkpoint::load(&checkpoint_path(run, k))?;
    let (_, _, test) = data.split(k)?;
    let dir = run.out.join("heatmaps");
    mkdir(&dir)?;
    let mut out = HeatmapOutput { paths: Vec::new(), witness_percentiles: Vec::new() };
    for bag in test.iter().take(run.heatmap_limit) {
        let alpha = saliency::extract_attention(&model, bag)?;
        let path = dir.join(format!("{}.pgm", bag.id));
        saliency::export_heatmap(&alpha, &bag.coords, &path, run.normalization)?;
        out.paths.push(path);
        if let Some(mask) = bag.witness.as_ref().filter(|m| m.iter().any(|&w| w)) {
            out.witness_percentiles.push((bag.id.clone(), saliency::witness_percentile(&alpha, mask)?));
        }
    }
    let mut s = String::from("bag\twitness_percentile\n");
    for (id, p) in &out.witness_percentiles {
        let _ = writeln!(s, "{id}\t{p:.6}");
    }
    write(&dir.join("witness.tsv"), s)?;
    Ok(out)
}

// ---------------------------------------------------------------- gradcheck

pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    /// Worst relative error per parameter array.
    pub groups: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl GradcheckOutcome {
    pub fn pass(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }

    pub fn render(&self) -> String {
        let mut s = String::from("parameter\tmax_rel_err\n");
        for (n, e) in &self.groups {
            let _ = writeln!(s, "{n}\t{e:.3e}");
        }
        let verdict = if self.pass() { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "worst {:.3e} over {} entries: {verdict} (tol {GRADCHECK_TOL:e})", self.max_rel_err, self.entries);
        s
    }
}

/// Model used by the gradient check: the run's task, aggregator, layer count
/// and switches at width 16 on 8 input features.
pub fn gradcheck_config(run: &RunConfig) -> ModelConfig {
    let base = run.model_config();
    ModelConfig {
        in_dim: 8,
        block: BlockConfig { d_model: 16, heads: 2, head_dim: 8, d_ff: 32, chunk_size: 4, ..base.block.clone() },
        attn_dim: 8,
        n_bins: base.n_bins.min(4),
        ..base
    }
}

/// Central differences against the tape for every parameter of a jittered
/// model on a 12-patch bag.
pub fn cmd_gradcheck(run: &RunConfig, exec: Exec) -> Result<GradcheckOutcome> {
    run.validate()?;
    let cfg = gradcheck_config(run);
    let mut model = Model::new(cfg.clone(), run.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5eed);
    let target = match cfg.task {
        TaskKind::Classification => Target::Class(1),
        TaskKind::Survival => {
            let bounds: Vec<f64> = (1..cfg.n_bins).map(|b| 4.0 * b as f64).collect();
            model = model.with_survival(SurvivalHead::new(bounds)?)?;
            Target::Survival { time: 6.0, event: true }
        }
    };
    for a in model.params.values_mut() {
        a.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
    }
    let n = 12;
    let features = NumArray::from_parts(vec![n, cfg.in_dim], (0..n * cfg.in_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    let coords = (0..n as u32).map(|i| Coord::new(i / 4, i % 4)).collect();
    let bag = PatchBag::new("gradcheck", features, coords, target)?;

    let named = model.params.named();
    let flat: Vec<NumArray> = named.iter().map(|(_, a)| (*a).clone()).collect();
    let report = finite_diff_check(
        |tape, vars| {
            let mut it = vars.iter().copied();
            let p = model.params.try_map(|_, _| it.next().ok_or(Error::Invalid("parameter count".into())))?;
            let out = forward_tape(tape, &cfg, &p, &bag, &mut None)?;
            loss_tape(tape, out.logits, &bag.target, model.survival.as_ref())
        },
        &flat,
        1e-5,
        exec,
    )?;
    Ok(GradcheckOutcome {
        groups: named.iter().map(|(n, _)| n.clone()).zip(report.per_param).collect(),
        max_rel_err: report.max_rel_err,
        entries: report.entries,
    })
}
