//! Synthetic planted-witness bags, the binary bag file format and the
//! fold manifest.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::array::NumArray;
use crate::error::{Error, Result};
use crate::locality::Coord;
use crate::model::{PatchBag, Target};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_bags: usize,
    pub patches_per_bag: usize,
    pub feature_dim: usize,
    /// Per-patch witness probability `p`.
    pub witness_rate: f64,
    pub n_classes: usize,
    /// Norm of each class signal vector in units of `noise_std`.
    pub signal_strength: f64,
    pub noise_std: f64,
    pub survival: bool,
    /// Hazard of a bag with no witnesses, per month.
    pub base_rate: f64,
    /// Log-hazard slope in the latent risk.
    pub kappa: f64,
    /// Censoring hazard per month; 0 disables censoring.
    pub censor_rate: f64,
    /// Survival bags scale their witness rate by `u ~ U(0, risk_spread)`.
    pub risk_spread: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_bags: 200,
            patches_per_bag: 256,
            feature_dim: 32,
            witness_rate: 0.05,
            n_classes: 2,
            signal_strength: 2.5,
            noise_std: 1.0,
            survival: false,
            base_rate: 1.0 / 30.0,
            kappa: 1.0,
            censor_rate: 1.0 / 90.0,
            risk_spread: 5.0,
            folds: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_bags == 0 || self.patches_per_bag == 0 || self.feature_dim == 0 {
            return bad("n_bags, patches_per_bag and feature_dim must be positive".into());
        }
        if !(self.witness_rate > 0.0 && self.witness_rate < 1.0) {
            return bad(format!("witness_rate must lie in (0,1), got {}", self.witness_rate));
        }
        if self.witness_rate * (self.patches_per_bag as f64) < 1.0 {
            return bad(format!(
                "witness_rate * patches_per_bag must be at least 1, got {}",
                self.witness_rate * self.patches_per_bag as f64
            ));
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if !(self.noise_std > 0.0) || !(self.signal_strength > 0.0) {
            return bad("noise_std and signal_strength must be positive".into());
        }
        if self.survival && (!(self.base_rate > 0.0) || !(self.censor_rate >= 0.0) || !(self.risk_spread > 0.0)) {
            return bad("base_rate and risk_spread must be positive and censor_rate nonnegative".into());
        }
        if self.folds == 0 || self.folds > self.n_bags {
            return bad(format!("folds must lie in 1..={}, got {}", self.n_bags, self.folds));
        }
        Ok(())
    }

    /// Near-square row-major layout: width `ceil(sqrt(N))`.
    pub fn coords(&self) -> Vec<Coord> {
        let n = self.patches_per_bag;
        let width = ((n as f64).sqrt().ceil() as usize).max(1);
        (0..n).map(|i| Coord::new((i / width) as u32, (i % width) as u32)).collect()
    }

    /// One signal vector per class; entry 0 (background) is all zeros.
    /// Non-background vectors are pairwise non-collinear (|cos| < 0.9).
    pub fn class_signals(&self) -> Vec<Vec<f64>> {
        let mut rng = stream(self.seed, 0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let norm = self.signal_strength * self.noise_std;
        let mut out = vec![vec![0.0; self.feature_dim]];
        while out.len() < self.n_classes {
            let raw: Vec<f64> = (0..self.feature_dim).map(|_| normal.sample(&mut rng)).collect();
            let len = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v: Vec<f64> = raw.iter().map(|x| x / len * norm).collect();
            let collinear = out[1..].iter().any(|u| {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                (dot / (norm * norm)).abs() >= 0.9
            });
            if !collinear || self.feature_dim == 1 {
                out.push(v);
            }
        }
        out
    }

    /// Class of bag `index`: round-robin over classes.
    pub fn class_of(&self, index: usize) -> usize {
        index % self.n_classes
    }

    /// Fold of bag `index`: contiguous equal blocks.
    pub fn fold_of(&self, index: usize) -> usize {
        index * self.folds / self.n_bags
    }
}

/// Independent random stream `index` of `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn planted(
    cfg: &SynthConfig,
    signal: &[f64],
    rate: f64,
    rng: &mut impl Rng,
) -> (NumArray, Vec<bool>) {
    let (n, c) = (cfg.patches_per_bag, cfg.feature_dim);
    let noise = Normal::new(0.0, cfg.noise_std).expect("positive noise");
    let mut data = Vec::with_capacity(n * c);
    let mut mask = Vec::with_capacity(n);
    for _ in 0..n {
        let witness = rate > 0.0 && rng.random::<f64>() < rate;
        mask.push(witness);
        for j in 0..c {
            let base = if witness { signal[j] } else { 0.0 };
            data.push(base + noise.sample(rng));
        }
    }
    (NumArray::from_parts(vec![n, c], data), mask)
}

/// A classification bag of `class`. Class 0 carries no witnesses.
pub fn generate_bag(cfg: &SynthConfig, signals: &[Vec<f64>], class: usize, rng: &mut impl Rng) -> Result<PatchBag> {
    if class >= cfg.n_classes || class >= signals.len() {
        return Err(Error::InvalidClass { class, n_classes: cfg.n_classes });
    }
    let rate = if class == 0 { 0.0 } else { cfg.witness_rate };
    let (features, mask) = planted(cfg, &signals[class], rate, rng);
    PatchBag::new("synthetic", features, cfg.coords(), Target::Class(class))?.with_witness(mask)
}

/// A survival bag whose hazard grows with its witness load
/// `r = count/(pN)`.
pub fn generate_survival_bag(cfg: &SynthConfig, signals: &[Vec<f64>], rng: &mut impl Rng) -> Result<PatchBag> {
    if !cfg.survival {
        return Err(Error::Config("survival bags need survival mode".into()));
    }
    let signal = signals.get(1).ok_or(Error::InvalidClass { class: 1, n_classes: signals.len() })?;
    let u = rng.random_range(0.0..cfg.risk_spread);
    let rate = (cfg.witness_rate * u).min(1.0);
    let (features, mask) = planted(cfg, signal, rate, rng);
    let count = mask.iter().filter(|&&w| w).count() as f64;
    let r = count / (cfg.witness_rate * cfg.patches_per_bag as f64);
    let death: f64 = Exp::new(cfg.base_rate * (cfg.kappa * r).exp())
        .map_err(|e| Error::Config(format!("bad hazard: {e}")))?
        .sample(rng);
    let censor = if cfg.censor_rate > 0.0 {
        Exp::new(cfg.censor_rate).map_err(|e| Error::Config(format!("bad censoring: {e}")))?.sample(rng)
    } else {
        f64::INFINITY
    };
    let event = death <= censor;
    let time = death.min(censor).max(1e-6);
    PatchBag::new("synthetic", features, cfg.coords(), Target::Survival { time, event })?.with_witness(mask)
}

/// Every bag of the configured dataset, each from its own stream.
pub fn generate_dataset(cfg: &SynthConfig, exec: Exec) -> Result<Vec<PatchBag>> {
    cfg.validate()?;
    let signals = cfg.class_signals();
    par::map_range(exec, cfg.n_bags, |i| {
        let mut rng = stream(cfg.seed, i as u64 + 1);
        let mut bag = if cfg.survival {
            generate_survival_bag(cfg, &signals, &mut rng)?
        } else {
            generate_bag(cfg, &signals, cfg.class_of(i), &mut rng)?
        };
        bag.id = format!("bag_{i:05}");
        Ok(bag)
    })
    .into_iter()
    .collect()
}

pub const BAG_MAGIC: [u8; 4] = *b"DMB1";
pub const BAG_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const TAG_CLASS: u32 = 0;
const TAG_SURVIVAL: u32 = 1;

/// Encode a bag. Features are stored as f32.
pub fn encode_bag(bag: &PatchBag) -> Vec<u8> {
    let (n, c) = (bag.len(), bag.features.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n + 4 * n * c + 20 + n);
    out.extend_from_slice(&BAG_MAGIC);
    let tag = match bag.target {
        Target::Class(_) => TAG_CLASS,
        Target::Survival { .. } => TAG_SURVIVAL,
    };
    for v in [BAG_VERSION, n as u32, c as u32, tag] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for co in &bag.coords {
        out.extend_from_slice(&co.row.to_le_bytes());
        out.extend_from_slice(&co.col.to_le_bytes());
    }
    for &x in bag.features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    match bag.target {
        Target::Class(label) => out.extend_from_slice(&(label as u32).to_le_bytes()),
        Target::Survival { time, event } => {
            out.extend_from_slice(&time.to_le_bytes());
            out.extend_from_slice(&(event as u32).to_le_bytes());
        }
    }
    match &bag.witness {
        Some(mask) => {
            out.extend_from_slice(&1u32.to_le_bytes());
            out.extend(mask.iter().map(|&w| w as u8));
        }
        None => out.extend_from_slice(&0u32.to_le_bytes()),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const K: usize>(&mut self) -> [u8; K] {
        let out: [u8; K] = self.bytes[self.pos..self.pos + K].try_into().expect("length checked");
        self.pos += K;
        out
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
}

/// Decode a bag; `id` becomes the bag identifier.
pub fn decode_bag(bytes: &[u8], id: &str) -> Result<PatchBag> {
    let actual = bytes.len();
    if actual < 4 {
        return Err(Error::Truncated { expected: HEADER_LEN, actual });
    }
    if bytes[..4] != BAG_MAGIC {
        return Err(Error::BadMagic { expected: BAG_MAGIC, found: bytes[..4].try_into().expect("four bytes") });
    }
    if actual < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN, actual });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32();
    if version != BAG_VERSION {
        return Err(Error::VersionMismatch { expected: BAG_VERSION, found: version });
    }
    let (n, c, tag) = (r.u32() as usize, r.u32() as usize, r.u32());
    let target_len = match tag {
        TAG_CLASS => 4,
        TAG_SURVIVAL => 12,
        other => return Err(Error::Corrupt(format!("unknown task tag {other}"))),
    };
    let fixed = HEADER_LEN + 8 * n + 4 * n * c + target_len + 4;
    if actual < fixed {
        return Err(Error::Truncated { expected: fixed, actual });
    }
    let coords: Vec<Coord> = (0..n).map(|_| Coord::new(r.u32(), r.u32())).collect();
    let data: Vec<f64> = (0..n * c).map(|_| f32::from_le_bytes(r.take()) as f64).collect();
    let target = if tag == TAG_CLASS {
        Target::Class(r.u32() as usize)
    } else {
        let time = f64::from_le_bytes(r.take());
        let event = match r.u32() {
            0 => false,
            1 => true,
            other => return Err(Error::Corrupt(format!("event flag {other}"))),
        };
        Target::Survival { time, event }
    };
    let has_mask = r.u32();
    let expected = match has_mask {
        0 => fixed,
        1 => fixed + n,
        other => return Err(Error::Corrupt(format!("mask flag {other}"))),
    };
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Corrupt(format!("{} trailing bytes", actual - expected)));
    }
    let bag = PatchBag::new(id, NumArray::from_parts(vec![n, c], data), coords, target)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    if has_mask == 1 {
        let mask = bytes[r.pos..expected].iter().map(|&b| b != 0).collect();
        return bag.with_witness(mask);
    }
    Ok(bag)
}

pub fn write_bag(path: &Path, bag: &PatchBag) -> Result<()> {
    fs::write(path, encode_bag(bag)).map_err(|e| Error::io(path, e))
}

/// Read a bag file; the id is the file stem.
pub fn read_bag(path: &Path) -> Result<PatchBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_bag(&bytes, &id)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: Option<usize>,
    pub time: Option<f64>,
    pub event: Option<bool>,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub n_folds: usize,
    pub warnings: Vec<String>,
}

/// Row indices of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

const COLUMNS: [&str; 5] = ["bag_path", "label", "time", "event", "fold"];

/// Parse a tab-separated manifest with a header row. Relative bag paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Manifest(format!("header: {e}")))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Manifest("empty manifest".into()));
    }
    let mut col: HashMap<&str, usize> = HashMap::new();
    for (i, name) in header.iter().enumerate() {
        let known = COLUMNS.iter().find(|&&c| c == name).ok_or_else(|| Error::Manifest(format!("unknown column {name:?}")))?;
        if col.insert(known, i).is_some() {
            return Err(Error::Manifest(format!("column {name:?} repeated")));
        }
    }
    for required in ["bag_path", "fold"] {
        if !col.contains_key(required) {
            return Err(Error::Manifest(format!("missing column {required:?}")));
        }
    }
    let field = |rec: &csv::StringRecord, name: &str| col.get(name).and_then(|&i| rec.get(i)).filter(|s| !s.is_empty()).map(str::to_owned);
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Manifest(format!("row {}: {e}", line + 1)))?;
        let parse_err = |what: &str, v: &str| Error::Manifest(format!("row {}: bad {what} {v:?}", line + 1));
        let bag_path = field(&rec, "bag_path").ok_or_else(|| Error::Manifest(format!("row {}: empty bag_path", line + 1)))?;
        let fold_s = field(&rec, "fold").ok_or_else(|| Error::Manifest(format!("row {}: empty fold", line + 1)))?;
        let fold = fold_s.parse::<usize>().map_err(|_| parse_err("fold", &fold_s))?;
        let label = field(&rec, "label").map(|s| s.parse::<usize>().map_err(|_| parse_err("label", &s))).transpose()?;
        let time = field(&rec, "time").map(|s| s.parse::<f64>().map_err(|_| parse_err("time", &s))).transpose()?;
        let event = field(&rec, "event")
            .map(|s| match s.as_str() {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                _ => Err(parse_err("event", &s)),
            })
            .transpose()?;
        let p = PathBuf::from(&bag_path);
        let path = if p.is_absolute() { p } else { base.join(p) };
        rows.push(ManifestRow { path, label, time, event, fold });
    }
    if rows.is_empty() {
        return Err(Error::Manifest("empty manifest".into()));
    }

    let mut warnings = Vec::new();
    let mut seen: HashMap<&Path, usize> = HashMap::new();
    for (i, row) in rows.iter().enumerate() {
        if let Some(&j) = seen.get(row.path.as_path()) {
            if rows[j].fold != row.fold {
                return Err(Error::Manifest(format!(
                    "overlapping folds: {} appears in folds {} and {}",
                    row.path.display(),
                    rows[j].fold,
                    row.fold
                )));
            }
            let msg = format!("duplicate bag_path {} (rows {} and {}); both kept", row.path.display(), j + 1, i + 1);
            log::warn!("{msg}");
            warnings.push(msg);
        } else {
            seen.insert(&row.path, i);
        }
    }
    let n_folds = rows.iter().map(|r| r.fold).max().expect("non-empty") + 1;
    for k in 0..n_folds {
        if !rows.iter().any(|r| r.fold == k) {
            return Err(Error::Manifest(format!("fold {k} has no rows")));
        }
    }
    Ok(Manifest { rows, n_folds, warnings })
}

/// Serialize rows in the [`load_manifest`] layout with paths as given.
pub fn format_manifest(rows: &[ManifestRow]) -> String {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    w.write_record(COLUMNS).expect("in-memory write");
    for r in rows {
        let opt = |v: Option<String>| v.unwrap_or_default();
        w.write_record([
            r.path.to_string_lossy().into_owned(),
            opt(r.label.map(|l| l.to_string())),
            opt(r.time.map(|t| format!("{t:?}"))),
            opt(r.event.map(|e| (e as u8).to_string())),
            r.fold.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

impl Manifest {
    /// Fold `k` is the test set; every fifth remaining row (by position)
    /// is validation, the rest train. With a single fold the test set is
    /// every fifth row instead.
    pub fn split(&self, k: usize) -> Result<FoldSplit> {
        if k >= self.n_folds {
            return Err(Error::Config(format!("fold {k} out of range (manifest has {})", self.n_folds)));
        }
        let all: Vec<usize> = (0..self.rows.len()).collect();
        let (test, pool): (Vec<usize>, Vec<usize>) = if self.n_folds == 1 {
            all.iter().partition(|&&i| i % 5 == 0)
        } else {
            all.iter().partition(|&&i| self.rows[i].fold == k)
        };
        let (val, train): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
            pool.into_iter().enumerate().partition(|(j, _)| j % 5 == 0);
        let split = FoldSplit {
            train: train.into_iter().map(|(_, i)| i).collect(),
            val: val.into_iter().map(|(_, i)| i).collect(),
            test,
        };
        if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
            return Err(Error::Manifest(format!("fold {k} leaves an empty train, validation or test set")));
        }
        Ok(split)
    }

    /// Read every bag, checking the manifest's task fields against the file.
    pub fn load_bags(&self, exec: Exec) -> Result<Vec<PatchBag>> {
        par::map(exec, &self.rows, |row| {
            let bag = read_bag(&row.path)?;
            let consistent = match bag.target {
                Target::Class(c) => row.label.is_none_or(|l| l == c),
                Target::Survival { event, .. } => row.event.is_none_or(|e| e == event),
            };
            if !consistent {
                return Err(Error::Manifest(format!("{}: manifest fields disagree with the bag file", row.path.display())));
            }
            Ok(bag)
        })
        .into_iter()
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_bags: 10, patches_per_bag: 64, feature_dim: 6, witness_rate: 0.1, ..Default::default() }
    }

    #[test]
    fn sparse_witness_fraction() {
        let cfg = SynthConfig { patches_per_bag: 4000, witness_rate: 0.0025, ..Default::default() };
        assert!((cfg.witness_rate * cfg.patches_per_bag as f64 - 10.0).abs() < 1e-12);
        cfg.validate().unwrap();
    }

    #[test]
    fn class_zero_has_no_witnesses() {
        let cfg = small();
        let sig = cfg.class_signals();
        let bag = generate_bag(&cfg, &sig, 0, &mut stream(1, 1)).unwrap();
        assert!(bag.witness.unwrap().iter().all(|&w| !w));
        assert!(matches!(generate_bag(&cfg, &sig, 2, &mut stream(1, 1)), Err(Error::InvalidClass { .. })));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small();
        assert_eq!(generate_dataset(&cfg, Exec::Parallel).unwrap(), generate_dataset(&cfg, Exec::Sequential).unwrap());
    }

    #[test]
    fn signals_are_scaled_and_distinct() {
        let cfg = SynthConfig { n_classes: 4, feature_dim: 8, signal_strength: 2.0, noise_std: 0.5, ..Default::default() };
        let s = cfg.class_signals();
        assert_eq!(s.len(), 4);
        assert!(s[0].iter().all(|&x| x == 0.0));
        for v in &s[1..] {
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_censoring_observes_every_death() {
        let cfg = SynthConfig { survival: true, censor_rate: 0.0, ..small() };
        for bag in generate_dataset(&cfg, Exec::Sequential).unwrap() {
            assert!(matches!(bag.target, Target::Survival { event: true, .. }));
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { witness_rate: 1.5, ..small() }.validate().is_err());
        assert!(SynthConfig { witness_rate: 0.001, ..small() }.validate().is_err());
        assert!(SynthConfig { folds: 11, ..small() }.validate().is_err());
        let one = SynthConfig { folds: 1, ..small() };
        assert!((0..10).all(|i| one.fold_of(i) == 0));
        let five = SynthConfig { folds: 5, ..small() };
        assert_eq!((0..10).map(|i| five.fold_of(i)).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let cfg = SynthConfig { survival: true, ..small() };
        let bag = generate_dataset(&cfg, Exec::Sequential).unwrap().remove(3);
        let bytes = encode_bag(&bag);
        let (n, c) = (bag.len(), bag.features.cols());
        assert_eq!(bytes.len(), HEADER_LEN + 8 * n + 4 * n * c + 12 + 4 + n);
        let back = decode_bag(&bytes, "bag_00003").unwrap();
        assert_eq!(back.coords, bag.coords);
        assert_eq!(back.target, bag.target);
        assert_eq!(back.witness, bag.witness);
        for (a, b) in back.features.data().iter().zip(bag.features.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(encode_bag(&back), bytes);
    }

    #[test]
    fn corrupt_files_are_reported_distinctly() {
        let bag = generate_dataset(&small(), Exec::Sequential).unwrap().remove(1);
        let bytes = encode_bag(&bag);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bag(&bad, "x"), Err(Error::BadMagic { .. })));
        let short = &bytes[..bytes.len() - 1];
        match decode_bag(short, "x") {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!((expected, actual), (bytes.len(), bytes.len() - 1));
            }
            other => panic!("{other:?}"),
        }
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode_bag(&ver, "x"), Err(Error::VersionMismatch { found: 9, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_bag(&long, "x"), Err(Error::Corrupt(_))));
    }

    fn manifest_text(rows: &[(&str, usize)]) -> String {
        let mut s = String::from("bag_path\tlabel\tfold\n");
        for (p, f) in rows {
            s.push_str(&format!("{p}\t0\t{f}\n"));
        }
        s
    }

    #[test]
    fn manifest_round_robin_folds() {
        let rows: Vec<(String, usize)> = (0..10).map(|i| (format!("b{i}.bag"), i / 2)).collect();
        let refs: Vec<(&str, usize)> = rows.iter().map(|(p, f)| (p.as_str(), *f)).collect();
        let m = parse_manifest(&manifest_text(&refs), Path::new("/data")).unwrap();
        assert_eq!(m.n_folds, 5);
        for k in 0..5 {
            let s = m.split(k).unwrap();
            assert_eq!(s.test, vec![2 * k, 2 * k + 1]);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        assert_eq!(m.rows[0].path, PathBuf::from("/data/b0.bag"));
    }

    #[test]
    fn manifest_errors_and_warnings() {
        assert!(matches!(parse_manifest("", Path::new(".")), Err(Error::Manifest(_))));
        assert!(matches!(parse_manifest("bag_path\tfold\n", Path::new(".")), Err(Error::Manifest(_))));
        let unknown = parse_manifest("bag_path\tfold\tcolour\na\t0\tred\n", Path::new("."));
        assert!(matches!(unknown, Err(Error::Manifest(m)) if m.contains("colour")));
        let overlap = parse_manifest(&manifest_text(&[("a", 0), ("a", 1)]), Path::new("."));
        assert!(matches!(overlap, Err(Error::Manifest(m)) if m.contains("overlapping")));
        let dup = parse_manifest(&manifest_text(&[("a", 0), ("a", 0), ("b", 1)]), Path::new(".")).unwrap();
        assert_eq!(dup.rows.len(), 3);
        assert_eq!(dup.warnings.len(), 1);
    }

    #[test]
    fn manifest_format_parses_back() {
        let rows = vec![
            ManifestRow { path: "x.bag".into(), label: None, time: Some(3.25), event: Some(true), fold: 0 },
            ManifestRow { path: "y.bag".into(), label: None, time: Some(1.0 / 3.0), event: Some(false), fold: 1 },
        ];
        let m = parse_manifest(&format_manifest(&rows), Path::new("")).unwrap();
        assert_eq!(m.rows, rows);
    }
}
