//! Key ranking: per-hypothesis log-likelihood scores, rank, average rank over
//! repeated random attack subsets, and guessing-entropy thresholds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::AES_SBOX;
use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Probability floor inside the logarithm.
pub const SCORE_EPSILON: f64 = 1e-40;
pub const DEFAULT_REPETITIONS: usize = 50;
pub const DEFAULT_THRESHOLDS: [u32; 4] = [0, 1, 20, 50];

/// Maps (plaintext byte, key hypothesis) to a predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LeakageModelSpec {
    /// `table[p ^ k]`, 256 classes. The AES S-box when no table is given.
    SboxId { table: Option<Vec<u8>> },
    /// `HW(table[p ^ k] ^ p)`, 9 classes.
    SboxHd { table: Option<Vec<u8>> },
    /// `table[(p ^ k) mod m]` with `m = table.len()`.
    SyntheticId { table: Vec<u8> },
}

impl LeakageModelSpec {
    pub fn aes_id() -> Self {
        LeakageModelSpec::SboxId { table: None }
    }

    fn table(&self) -> &[u8] {
        match self {
            LeakageModelSpec::SboxId { table } | LeakageModelSpec::SboxHd { table } => {
                table.as_deref().unwrap_or(&AES_SBOX)
            }
            LeakageModelSpec::SyntheticId { table } => table,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            LeakageModelSpec::SboxId { .. } => 256,
            LeakageModelSpec::SboxHd { .. } => 9,
            LeakageModelSpec::SyntheticId { table } => table.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.table();
        let ok = match self {
            LeakageModelSpec::SboxId { .. } | LeakageModelSpec::SboxHd { .. } => t.len() == 256,
            LeakageModelSpec::SyntheticId { .. } => {
                (2..=256).contains(&t.len()) && 256 % t.len() == 0 && t.iter().all(|v| usize::from(*v) < t.len())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("leakage table has the wrong size or range".into()))
        }
    }

    pub fn class_of(&self, p: u8, k: u8) -> usize {
        let t = self.table();
        match self {
            LeakageModelSpec::SboxId { .. } => usize::from(t[usize::from(p ^ k)]),
            LeakageModelSpec::SboxHd { .. } => (t[usize::from(p ^ k)] ^ p).count_ones() as usize,
            LeakageModelSpec::SyntheticId { .. } => usize::from(t[usize::from(p ^ k) % t.len()]),
        }
    }
}

/// `log_scores[k] = Σᵢ ln max(yᵢ[class_of(pᵢ, k)], ε)` over all 256 key
/// hypotheses.
pub fn key_scores(predictions: &[Vec<f64>], plaintexts: &[u8], model: &LeakageModelSpec) -> Result<Vec<f64>> {
    if predictions.len() != plaintexts.len() {
        return Err(Error::input(format!(
            "{} predictions for {} plaintexts",
            predictions.len(),
            plaintexts.len()
        )));
    }
    let m = model.n_classes();
    let mut scores = vec![0.0; 256];
    for (y, p) in predictions.iter().zip(plaintexts) {
        if y.len() != m {
            return Err(Error::input(format!("prediction width {} differs from {m} classes", y.len())));
        }
        accumulate(&mut scores, y, *p, model);
    }
    Ok(scores)
}

fn accumulate(scores: &mut [f64], y: &[f64], p: u8, model: &LeakageModelSpec) {
    for (k, s) in scores.iter_mut().enumerate() {
        *s += y[model.class_of(p, k as u8)].clamp(SCORE_EPSILON, 1.0).ln();
    }
}

/// Number of hypotheses scoring strictly higher than `key`.
pub fn rank(scores: &[f64], key: u8) -> usize {
    let target = scores[usize::from(key)];
    scores.iter().filter(|s| **s > target).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCurve {
    pub trace_counts: Vec<usize>,
    pub mean_rank: Vec<f64>,
    pub min_rank: Vec<usize>,
    pub median_rank: Vec<f64>,
    pub n_repetitions: usize,
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Ranks per repetition: a random permutation of the attack traces, with the
/// first `N` entries forming the subset for each `N` in `trace_counts`.
/// Repetition `r` draws from the stream `("attack-repetition", r)` of `seed`.
pub fn rank_matrix(
    predictions: &[Vec<f64>],
    plaintexts: &[u8],
    key: u8,
    model: &LeakageModelSpec,
    trace_counts: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if trace_counts.is_empty() || repetitions == 0 {
        return Err(Error::input("need at least one trace count and one repetition"));
    }
    if trace_counts.windows(2).any(|w| w[0] >= w[1]) || trace_counts[0] == 0 {
        return Err(Error::input("trace counts must be positive and strictly increasing"));
    }
    let max = *trace_counts.last().expect("nonempty");
    if max > predictions.len() {
        return Err(Error::input(format!("{max} traces requested, {} available", predictions.len())));
    }
    // Validate widths once up front.
    key_scores(predictions, plaintexts, model)?;

    Ok((0..repetitions)
        .into_par_iter()
        .map(|r| {
            let mut rng = derive_rng(seed, "attack-repetition", r as u64);
            let mut order: Vec<usize> = (0..predictions.len()).collect();
            order.shuffle(&mut rng);
            let mut scores = vec![0.0; 256];
            let mut ranks = Vec::with_capacity(trace_counts.len());
            let mut used = 0;
            for &n in trace_counts {
                for &i in &order[used..n] {
                    accumulate(&mut scores, &predictions[i], plaintexts[i], model);
                }
                used = n;
                ranks.push(rank(&scores, key));
            }
            ranks
        })
        .collect())
}

/// Mean, minimum and median rank across repetitions at each trace count.
pub fn average_rank(
    predictions: &[Vec<f64>],
    plaintexts: &[u8],
    key: u8,
    model: &LeakageModelSpec,
    trace_counts: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<RankCurve> {
    let ranks = rank_matrix(predictions, plaintexts, key, model, trace_counts, repetitions, seed)?;
    let mut curve = RankCurve {
        trace_counts: trace_counts.to_vec(),
        mean_rank: Vec::new(),
        min_rank: Vec::new(),
        median_rank: Vec::new(),
        n_repetitions: repetitions,
    };
    for j in 0..trace_counts.len() {
        let mut column: Vec<usize> = ranks.iter().map(|r| r[j]).collect();
        column.sort_unstable();
        curve.mean_rank.push(column.iter().sum::<usize>() as f64 / repetitions as f64);
        curve.min_rank.push(column[0]);
        curve.median_rank.push(median(&column));
    }
    Ok(curve)
}

/// Smallest trace count whose mean rank is at most each threshold, or `None`
/// when never reached.
pub fn tge_metrics(curve: &RankCurve, thresholds: &[u32]) -> BTreeMap<u32, Option<usize>> {
    thresholds
        .iter()
        .map(|&t| {
            let hit = curve
                .trace_counts
                .iter()
                .zip(&curve.mean_rank)
                .find(|(_, r)| **r <= f64::from(t))
                .map(|(n, _)| *n);
            (t, hit)
        })
        .collect()
}

pub const CURVE_HEADER: &str = "n_traces,mean_rank,min_rank,median_rank";

pub fn curve_to_csv(curve: &RankCurve) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for j in 0..curve.trace_counts.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            curve.trace_counts[j], curve.mean_rank[j], curve.min_rank[j], curve.median_rank[j]
        );
    }
    out
}

pub fn curve_from_csv(text: &str, n_repetitions: usize) -> Result<RankCurve> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::input("rank curve header mismatch"));
    }
    let mut curve = RankCurve {
        trace_counts: Vec::new(),
        mean_rank: Vec::new(),
        min_rank: Vec::new(),
        median_rank: Vec::new(),
        n_repetitions,
    };
    for line in lines.filter(|l| !l.is_empty()) {
        let bad = || Error::input(format!("malformed rank curve row {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        curve.trace_counts.push(f[0].parse().map_err(|_| bad())?);
        curve.mean_rank.push(f[1].parse().map_err(|_| bad())?);
        curve.min_rank.push(f[2].parse().map_err(|_| bad())?);
        curve.median_rank.push(f[3].parse().map_err(|_| bad())?);
    }
    Ok(curve)
}

pub fn tge_to_csv(metrics: &BTreeMap<u32, Option<usize>>) -> String {
    let mut out = String::from("threshold,min_traces\n");
    for (t, n) in metrics {
        let cell = n.map(|v| v.to_string()).unwrap_or_else(|| "F".into());
        let _ = writeln!(out, "T_GE{t},{cell}");
    }
    out
}

/// Line chart of mean and median rank against the number of traces.
pub fn curve_to_svg(curve: &RankCurve) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let max_n = curve.trace_counts.last().copied().unwrap_or(1).max(1) as f64;
    let max_r = curve
        .mean_rank
        .iter()
        .chain(&curve.median_rank)
        .copied()
        .fold(1.0f64, f64::max);
    let x = |n: usize| PAD + (n as f64 / max_n) * (W - 2.0 * PAD);
    let y = |r: f64| H - PAD - (r / max_r) * (H - 2.0 * PAD);
    let points = |values: &[f64]| {
        curve
            .trace_counts
            .iter()
            .zip(values)
            .map(|(n, r)| format!("{:.2},{:.2}", x(*n), y(*r)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(svg, r#"  <rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"  <line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(svg, r#"  <line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    let _ = writeln!(
        svg,
        r#"  <text x="{}" y="{}" text-anchor="middle" font-size="12">number of traces (max {})</text>"#,
        W / 2.0,
        H - 15.0,
        max_n
    );
    let _ = writeln!(
        svg,
        r#"  <text x="15" y="{}" font-size="12" transform="rotate(-90 15 {})" text-anchor="middle">rank (max {:.1})</text>"#,
        H / 2.0,
        H / 2.0,
        max_r
    );
    let _ = writeln!(
        svg,
        r#"  <polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
        points(&curve.mean_rank)
    );
    let _ = writeln!(
        svg,
        r#"  <polyline fill="none" stroke="darkorange" stroke-width="1.5" stroke-dasharray="4 3" points="{}"/>"#,
        points(&curve.median_rank)
    );
    let _ = writeln!(svg, r#"  <text x="{}" y="{}" font-size="12" fill="steelblue">mean</text>"#, W - PAD - 60.0, PAD);
    let _ = writeln!(
        svg,
        r#"  <text x="{}" y="{}" font-size="12" fill="darkorange">median</text>"#,
        W - PAD - 60.0,
        PAD + 15.0
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PRESENT_SBOX;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn oracle_predictions(plaintexts: &[u8], key: u8, model: &LeakageModelSpec) -> Vec<Vec<f64>> {
        plaintexts
            .iter()
            .map(|p| {
                let mut y = vec![0.0; model.n_classes()];
                y[model.class_of(*p, key)] = 1.0;
                y
            })
            .collect()
    }

    #[test]
    fn uniform_single_trace_scores_are_equal() {
        let model = LeakageModelSpec::aes_id();
        let s = key_scores(&[vec![1.0 / 256.0; 256]], &[17], &model).unwrap();
        assert!(s.iter().all(|v| *v == s[0]));
        assert_eq!(rank(&s, 99), 0);
    }

    #[test]
    fn confident_prediction_makes_true_key_strict_argmax() {
        let model = LeakageModelSpec::aes_id();
        let preds = oracle_predictions(&[0x3a], 0x42, &model);
        let s = key_scores(&preds, &[0x3a], &model).unwrap();
        assert_eq!(rank(&s, 0x42), 0);
        assert!(s.iter().enumerate().all(|(k, v)| k == 0x42 || *v < s[0x42]));
    }

    #[test]
    fn width_and_length_errors() {
        let model = LeakageModelSpec::aes_id();
        assert!(key_scores(&[vec![0.5; 256]], &[1, 2], &model).is_err());
        assert!(key_scores(&[vec![0.5; 16]], &[1], &model).is_err());
    }

    #[test]
    fn rank_semantics() {
        assert_eq!(rank(&[1.0, 5.0, 3.0], 1), 0);
        assert_eq!(rank(&[2.0; 256], 77), 0);
        assert_eq!(rank(&[1.0, 5.0, 3.0, 5.0], 0), 3);
    }

    #[test]
    fn hd_model_classes() {
        let model = LeakageModelSpec::SboxHd { table: None };
        for p in [0u8, 1, 200] {
            for k in [0u8, 9, 255] {
                let c = model.class_of(p, k);
                assert!(c <= 8);
                assert_eq!(c as u32, (AES_SBOX[usize::from(p ^ k)] ^ p).count_ones());
            }
        }
    }

    #[test]
    fn oracle_predictor_reaches_zero_at_one_trace() {
        let model = LeakageModelSpec::aes_id();
        let mut rng = seeded(1);
        let pts: Vec<u8> = (0..50).map(|_| rng.random()).collect();
        let preds = oracle_predictions(&pts, 0xaa, &model);
        let curve = average_rank(&preds, &pts, 0xaa, &model, &[1, 2, 5], 10, 3).unwrap();
        assert_eq!(curve.mean_rank, vec![0.0; 3]);
        assert_eq!(tge_metrics(&curve, &DEFAULT_THRESHOLDS)[&0], Some(1));
    }

    #[test]
    fn synthetic_model_collapses_keys_modulo_m() {
        let model = LeakageModelSpec::SyntheticId { table: PRESENT_SBOX.to_vec() };
        assert_eq!(model.class_of(3, 5), model.class_of(3, 5 + 16));
        let pts: Vec<u8> = (0..=255).collect();
        let preds = oracle_predictions(&pts, 0x2b, &model);
        let s = key_scores(&preds, &pts, &model).unwrap();
        assert_eq!(rank(&s, 0x2b), 0);
    }

    #[test]
    fn tge_readings() {
        let curve = RankCurve {
            trace_counts: vec![10, 20, 30],
            mean_rank: vec![30.0, 5.0, 0.0],
            min_rank: vec![0; 3],
            median_rank: vec![0.0; 3],
            n_repetitions: 1,
        };
        let t = tge_metrics(&curve, &DEFAULT_THRESHOLDS);
        assert_eq!(t[&0], Some(30));
        assert_eq!(t[&20], Some(20));
        assert_eq!(t[&50], Some(10));

        let zero = RankCurve { mean_rank: vec![0.0; 3], ..curve.clone() };
        assert!(tge_metrics(&zero, &DEFAULT_THRESHOLDS).values().all(|v| *v == Some(10)));

        let high = RankCurve { mean_rank: vec![40.0, 30.0, 25.0], ..curve };
        let t = tge_metrics(&high, &DEFAULT_THRESHOLDS);
        assert_eq!(t[&20], None);
        assert!(tge_to_csv(&t).contains("T_GE20,F"));
    }

    #[test]
    fn average_rank_is_reproducible_and_validates() {
        let model = LeakageModelSpec::aes_id();
        let mut rng = seeded(2);
        let pts: Vec<u8> = (0..40).map(|_| rng.random()).collect();
        let preds: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let raw: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let a = average_rank(&preds, &pts, 1, &model, &[5, 10, 40], 8, 9).unwrap();
        let b = average_rank(&preds, &pts, 1, &model, &[5, 10, 40], 8, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.mean_rank.iter().all(|r| (0.0..=255.0).contains(r)));
        assert!(average_rank(&preds, &pts, 1, &model, &[41], 8, 9).is_err());
        assert!(average_rank(&preds, &pts, 1, &model, &[5, 5], 8, 9).is_err());
        let parsed = curve_from_csv(&curve_to_csv(&a), 8).unwrap();
        assert_eq!(parsed, a);
    }
}
