//! Attention-based patch retention experiments and heatmap export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::locality::{self, Coord, GridLayout};
use crate::metrics;
use crate::model::{Aggregator, Model, PatchBag, Prediction};
use crate::par::{self, Exec};
use crate::synth::stream;

/// Per-patch attention weights of `bag`, in patch order.
pub fn extract_attention(model: &Model, bag: &PatchBag) -> Result<Vec<f64>> {
    if model.config.aggregator != Aggregator::Attention {
        return Err(Error::NoAttention(model.config.aggregator.name()));
    }
    model.forward(bag)?.repr.attention.ok_or(Error::NoAttention(model.config.aggregator.name()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    RandomK,
    TopK,
    BottomK,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::RandomK, Strategy::TopK, Strategy::BottomK];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::RandomK => "random_k",
            Strategy::TopK => "top_k",
            Strategy::BottomK => "bottom_k",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// `k` patch indices, returned in ascending order. Top and bottom break
/// ties toward the lower index; random samples without replacement.
pub fn select_subset(alpha: &[f64], k: usize, strategy: Strategy, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = alpha.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    let mut picked = match strategy {
        Strategy::RandomK => rand::seq::index::sample(rng, n, k).into_vec(),
        Strategy::TopK | Strategy::BottomK => {
            let mut idx: Vec<usize> = (0..n).collect();
            if strategy == Strategy::TopK {
                idx.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
            } else {
                idx.sort_by(|&a, &b| alpha[a].total_cmp(&alpha[b]).then(a.cmp(&b)));
            }
            idx.truncate(k);
            idx
        }
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Prediction on the sub-bag `indices`; its grid is rebuilt from the
/// surviving coordinates.
pub fn repredict(model: &Model, bag: &PatchBag, indices: &[usize]) -> Result<Prediction> {
    model.predict(&bag.subset(indices)?)
}

/// Retained count for a ratio: `max(1, round(ratio·N))`.
pub fn k_for_ratio(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionCurve {
    pub strategy: Strategy,
    /// `(retained ratio, ACC)` with strictly increasing ratios.
    pub points: Vec<(f64, f64)>,
    /// Seeds averaged for random_k; empty for deterministic strategies.
    pub seeds: Vec<u64>,
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::Config("empty ratio grid".into()));
    }
    if let Some(r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::Config(format!("ratio {r} outside (0,1]")));
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("ratios must be strictly increasing".into()));
    }
    Ok(())
}

/// ACC after retaining `k(ratio)` patches per bag under `strategy`.
/// random_k averages over `seeds`; bag `i` under seed `s` samples from
/// stream `i` of `s`.
pub fn sweep(
    model: &Model,
    bags: &[PatchBag],
    strategy: Strategy,
    ratios: &[f64],
    seeds: &[u64],
    exec: Exec,
) -> Result<RetentionCurve> {
    check_ratios(ratios)?;
    if bags.is_empty() {
        return Err(Error::EmptyInput("sweep"));
    }
    let labels: Vec<usize> = bags
        .iter()
        .map(|b| b.label().ok_or_else(|| Error::Invalid("retention sweeps need classification bags".into())))
        .collect::<Result<_>>()?;
    let alphas: Vec<Vec<f64>> = par::map(exec, bags, |b| extract_attention(model, b)).into_iter().collect::<Result<_>>()?;
    let seed_list: Vec<u64> = match strategy {
        Strategy::RandomK if seeds.is_empty() => return Err(Error::Config("random_k needs at least one seed".into())),
        Strategy::RandomK => seeds.to_vec(),
        _ => vec![0],
    };
    let idx: Vec<usize> = (0..bags.len()).collect();
    let mut points = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut total = 0.0;
        for &seed in &seed_list {
            let probs = par::map(exec, &idx, |&i| {
                let k = k_for_ratio(ratio, bags[i].len());
                let mut rng = stream(seed, i as u64);
                let subset = select_subset(&alphas[i], k, strategy, &mut rng)?;
                let pred = repredict(model, &bags[i], &subset)?;
                pred.probs().map(<[f64]>::to_vec).ok_or_else(|| Error::Invalid("expected class probabilities".into()))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            total += metrics::accuracy(&probs, &labels)?;
        }
        points.push((ratio, total / seed_list.len() as f64));
    }
    let seeds = if strategy == Strategy::RandomK { seed_list } else { Vec::new() };
    Ok(RetentionCurve { strategy, points, seeds })
}

/// Plain-text table `strategy  ratio  metric  seed_count`.
pub fn render_curves(curves: &[RetentionCurve]) -> String {
    let mut s = String::from("strategy\tratio\tmetric\tseed_count\n");
    for c in curves {
        for (r, m) in &c.points {
            let _ = writeln!(s, "{}\t{r:.4}\t{m:.6}\t{}", c.strategy.name(), c.seeds.len().max(1));
        }
    }
    s
}

/// Empirical percentile of each entry: `(#less + ½#equal others)/(N−1)`;
/// a single entry maps to 0.5.
pub fn percentile_ranks(alpha: &[f64]) -> Vec<f64> {
    let n = alpha.len();
    if n == 1 {
        return vec![0.5];
    }
    let mut sorted = alpha.to_vec();
    sorted.sort_by(f64::total_cmp);
    alpha
        .iter()
        .map(|&a| {
            let less = sorted.partition_point(|&x| x < a);
            let equal = sorted.partition_point(|&x| x <= a) - less - 1;
            (less as f64 + 0.5 * equal as f64) / (n - 1) as f64
        })
        .collect()
}

/// Mean percentile rank of the witness patches.
pub fn witness_percentile(alpha: &[f64], mask: &[bool]) -> Result<f64> {
    if alpha.len() != mask.len() {
        return Err(Error::LengthMismatch { what: "witness mask", got: mask.len(), expected: alpha.len() });
    }
    let ranks = percentile_ranks(alpha);
    let w: Vec<f64> = ranks.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| *r).collect();
    if w.is_empty() {
        return Err(Error::EmptyInput("witness mask"));
    }
    Ok(w.iter().sum::<f64>() / w.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Percentile,
    /// Constant input maps to 0.5.
    MinMax,
}

impl Normalization {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "percentile" => Ok(Normalization::Percentile),
            "minmax" => Ok(Normalization::MinMax),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major; `None` marks unoccupied cells.
    pub values: Vec<Option<f64>>,
    pub normalization: Normalization,
}

impl Heatmap {
    pub fn new(alpha: &[f64], coords: &[Coord], normalization: Normalization) -> Result<Self> {
        if alpha.len() != coords.len() {
            return Err(Error::LengthMismatch { what: "coords", got: coords.len(), expected: alpha.len() });
        }
        let layout = GridLayout::new(&locality::normalize_coords(coords))?;
        let normed = match normalization {
            Normalization::Percentile => percentile_ranks(alpha),
            Normalization::MinMax => {
                let lo = alpha.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                alpha.iter().map(|&a| if hi > lo { (a - lo) / (hi - lo) } else { 0.5 }).collect()
            }
        };
        let mut values = vec![None; layout.n_cells()];
        for (&cell, v) in layout.cells.iter().zip(normed) {
            values[cell] = Some(v);
        }
        Ok(Self { height: layout.height, width: layout.width, values, normalization })
    }

    /// Binary P5 graymap; pixel = round(255·v), absent cells 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|v| v.map_or(0, |x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)));
        out
    }
}

/// Parse a binary P5 graymap with maxval 255 into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Corrupt("short graymap header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Corrupt(format!("unsupported graymap header {fields:?}")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Corrupt(format!("bad graymap size {s:?}")));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let pixels = bytes.get(pos..).unwrap_or(&[]).to_vec();
    if pixels.len() != w * h {
        return Err(Error::Truncated { expected: pos + w * h, actual: bytes.len() });
    }
    Ok((w, h, pixels))
}

pub fn export_heatmap(alpha: &[f64], coords: &[Coord], path: &Path, normalization: Normalization) -> Result<Heatmap> {
    let map = Heatmap::new(alpha, coords, normalization)?;
    fs::write(path, map.to_pgm()).map_err(|e| Error::io(path, e))?;
    Ok(map)
}
