//! ACC, AUC and C-index, plus the per-fold report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::argmax;

/// Fraction of rows whose argmax (ties toward the lowest index) equals the
/// label.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { what: "labels", got: labels.len(), expected: scores.len() });
    }
    let hits = scores.iter().zip(labels).filter(|(s, &l)| argmax(s) == l).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// 1-based ranks with ties sharing their mean rank.
fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && xs[idx[j]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Mann–Whitney AUC `P(s⁺ > s⁻) + ½P(s⁺ = s⁻)` from midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { what: "labels", got: labels.len(), expected: scores.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes (positives {n_pos}, negatives {n_neg})")));
    }
    let ranks = mid_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Binary AUC on the class-1 probability, or the macro one-vs-rest mean
/// over classes present in `labels` when there are more than two columns.
pub fn auc_ovr(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("AUC"));
    }
    let k = probs[0].len();
    if k == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let l: Vec<bool> = labels.iter().map(|&c| c == 1).collect();
        return auc(&s, &l);
    }
    let per_class: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let l: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            auc(&s, &l).ok()
        })
        .collect();
    if per_class.is_empty() {
        return Err(Error::UndefinedMetric("no class has both positives and negatives".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Fenwick tree of counts.
struct Counts(Vec<u64>);

impl Counts {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted positions `< i`.
    fn below(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's C: among pairs with `time_i < time_j` and `event_i`, credit 1
/// when `risk_i > risk_j` and ½ on risk ties.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::LengthMismatch { what: "survival records", got: times.len().min(events.len()), expected: n });
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Invalid(format!("survival times must be positive, got {t}")));
    }
    if risks.iter().any(|r| r.is_nan()) {
        return Err(Error::Invalid("NaN risk".into()));
    }
    // Dense ranks of risk values.
    let mut sorted = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|&x| x < r);

    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut later = Counts(vec![0; sorted.len() + 1]);
    let (mut inserted, mut credit2, mut comparable) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && times[by_time[j]] == times[by_time[i]] {
            j += 1;
        }
        for &s in &by_time[i..j] {
            if events[s] {
                let r = rank(risks[s]);
                let less = later.below(r);
                let tied = later.below(r + 1) - less;
                credit2 += 2 * less + tied;
                comparable += inserted;
            }
        }
        for &s in &by_time[i..j] {
            later.add(rank(risks[s]));
            inserted += 1;
        }
        i = j;
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric("C-index has no comparable pairs".into()));
    }
    Ok(credit2 as f64 / (2.0 * comparable as f64))
}

/// Mean and sample standard deviation (absent for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, std })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.4} ± {:.4}", self.mean, s),
            None => write!(f, "{:.4}", self.mean),
        }
    }
}

/// Test-set metrics of one fold; undefined metrics are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub c_index: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub acc: Option<Summary>,
    pub auc: Option<Summary>,
    pub c_index: Option<Summary>,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Self {
        let collect = |f: fn(&FoldMetrics) -> Option<f64>| Summary::of(&folds.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            acc: collect(|m| m.acc),
            auc: collect(|m| m.auc),
            c_index: collect(|m| m.c_index),
            folds,
        }
    }

    /// Plain-text table: one line per fold, then the summary.
    pub fn render(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("fold\tacc\tauc\tc_index\n");
        for m in &self.folds {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", m.fold, cell(m.acc), cell(m.auc), cell(m.c_index));
        }
        let sum = |v: Option<Summary>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        let _ = writeln!(s, "mean\t{}\t{}\t{}", sum(self.acc), sum(self.auc), sum(self.c_index));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(s: &[f64], l: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn accuracy_examples() {
        let p = |c: usize| if c == 0 { vec![0.9, 0.1] } else { vec![0.2, 0.8] };
        assert_eq!(accuracy(&[p(0), p(1)], &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[p(0), p(1)], &[1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[p(0), p(1), p(1), p(0)], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert_eq!(accuracy(&[vec![0.5, 0.5]], &[0]).unwrap(), 1.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[false, true, false, true, true]).unwrap(), 0.5);
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        assert_eq!(brute_auc(&s, &l), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_multiclass_skips_absent_classes() {
        let probs = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4], vec![0.6, 0.3, 0.1]];
        let labels = [0, 1, 0, 1];
        let class0 = auc(&[0.7, 0.1, 0.3, 0.6], &[true, false, true, false]).unwrap();
        let class1 = auc(&[0.2, 0.8, 0.3, 0.3], &[false, true, false, true]).unwrap();
        assert!((auc_ovr(&probs, &labels).unwrap() - (class0 + class1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn c_index_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(c_index(&[4.0, 3.0, 2.0, 1.0], &t, &[true; 4]).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0; 4], &t, &[true; 4]).unwrap(), 0.5);
        assert_eq!(c_index(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0], &[true, false, true]).unwrap(), 1.0);
        assert!(matches!(c_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]), Err(Error::UndefinedMetric(_))));
        assert!(c_index(&[1.0], &[0.0], &[true]).is_err());
    }

    #[test]
    fn c_index_ignores_time_ties() {
        assert!(matches!(c_index(&[1.0, 2.0], &[3.0, 3.0], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn summary_uses_sample_std() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, Some(1.0));
        assert_eq!(Summary::of(&[0.4]).unwrap().std, None);
        assert!(Summary::of(&[]).is_none());
    }
}
