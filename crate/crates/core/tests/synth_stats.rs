//! Statistical checks of the synthetic generators against ground truth.

use deltamil::metrics::{auc, c_index};
use deltamil::model::Target;
use deltamil::synth::{generate_bag, generate_dataset, stream, SynthConfig};
use deltamil::Exec;

#[test]
fn witness_fraction_concentrates_at_rate() {
    let cfg = SynthConfig { feature_dim: 4, ..Default::default() };
    let signals = cfg.class_signals();
    let fracs: Vec<f64> = (0..100)
        .map(|i| {
            let bag = generate_bag(&cfg, &signals, 1, &mut stream(11, i)).unwrap();
            let w = bag.witness.unwrap();
            w.iter().filter(|&&x| x).count() as f64 / w.len() as f64
        })
        .collect();
    let mean = fracs.iter().sum::<f64>() / 100.0;
    let p = cfg.witness_rate;
    let se = (p * (1.0 - p) / (cfg.patches_per_bag as f64 * 100.0)).sqrt();
    assert!((mean - p).abs() < 3.0 * se, "mean {mean} vs {p} ± 3·{se}");
}

#[test]
fn witness_mean_probe_separates_classes() {
    let cfg = SynthConfig::default();
    let signals = cfg.class_signals();
    let bags = generate_dataset(&cfg, Exec::default()).unwrap();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for bag in &bags {
        let mask = bag.witness.as_ref().unwrap();
        // mean over witness rows, or over the whole bag when it has none
        let rows: Vec<usize> = match mask.iter().any(|&w| w) {
            true => (0..bag.len()).filter(|&i| mask[i]).collect(),
            false => (0..bag.len()).collect(),
        };
        let probe: f64 = (0..cfg.feature_dim)
            .map(|j| rows.iter().map(|&i| bag.features.get2(i, j)).sum::<f64>() / rows.len() as f64 * signals[1][j])
            .sum();
        scores.push(probe);
        labels.push(bag.label() == Some(1));
    }
    let a = auc(&scores, &labels).unwrap();
    assert!(a > 0.99, "probe AUC {a}");
}

fn survival_records(kappa: f64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let cfg = SynthConfig { survival: true, kappa, feature_dim: 4, seed: 5, ..Default::default() };
    let bags = generate_dataset(&cfg, Exec::default()).unwrap();
    let mut load = Vec::new();
    let mut times = Vec::new();
    let mut events = Vec::new();
    for b in &bags {
        let Target::Survival { time, event } = b.target else { panic!("survival target expected") };
        load.push(b.witness.as_ref().unwrap().iter().filter(|&&w| w).count() as f64);
        times.push(time);
        events.push(event);
    }
    (load, times, events)
}

fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            // ties contribute zero; f64::signum(0.0) is 1.0
            let sign = |d: f64| if d == 0.0 { 0.0 } else { d.signum() };
            s += sign(x[i] - x[j]) * sign(y[i] - y[j]);
        }
    }
    s / (n * (n - 1) / 2) as f64
}

#[test]
fn survival_times_fall_with_witness_load() {
    let (load, times, _) = survival_records(1.0);
    let tau = kendall_tau(&load, &times);
    assert!(tau < 0.0, "tau {tau}");
}

#[test]
fn oracle_ranking_reaches_target_concordance() {
    let (load, times, events) = survival_records(1.0);
    let c = c_index(&load, &times, &events).unwrap();
    assert!(c >= 0.75, "oracle C-index {c}");
    let (load, times, events) = survival_records(0.0);
    let c0 = c_index(&load, &times, &events).unwrap();
    assert!((c0 - 0.5).abs() < 0.08, "kappa 0 C-index {c0}");
}
