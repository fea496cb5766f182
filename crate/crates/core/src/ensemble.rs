//! One-vs-all decomposition into per-class sub-models, stacked under a
//! multinomial logistic-regression meta-learner.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::criteria::{run_evolution, CriteriaConfig, StopReason, TraceRow};
use crate::data::{kfold_split, shuffle, FeatureScaler, TraceSet};
use crate::error::{Error, Result};
use crate::evolution::{Batch, EvolutionConfig};
use crate::network::{stable_softmax, Genome, GenomeRecord, Network};
use crate::rng::{derive_rng, derive_seed, Rng};

/// OvA label of the target class.
pub const TARGET: u8 = 0;
/// OvA label of every other class.
pub const REST: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub evolution: EvolutionConfig,
    pub criteria: CriteriaConfig,
    /// Share of each class held out for the meta-learner when
    /// `holdout_per_class` is unset.
    pub holdout_fraction: f64,
    pub holdout_per_class: Option<usize>,
    /// Per-class cap applied before the holdout split.
    pub per_class_cap: Option<usize>,
    pub meta_l2: f64,
    pub meta_max_iters: usize,
    pub meta_tol: f64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            evolution: EvolutionConfig::default(),
            criteria: CriteriaConfig::default(),
            holdout_fraction: 0.1,
            holdout_per_class: None,
            per_class_cap: None,
            meta_l2: 1e-4,
            meta_max_iters: 500,
            meta_tol: 1e-6,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.evolution.validate()?;
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        if !(self.meta_l2 >= 0.0) || !(self.meta_tol >= 0.0) {
            return Err(Error::Config("meta_l2 and meta_tol must be non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Balanced target-vs-rest set for class `c`: equal numbers of positives and
/// negatives (the smaller side's count), drawn at random and shuffled.
/// Labels become [`TARGET`] and [`REST`].
pub fn build_ova_dataset(set: &TraceSet, c: u8, rng: &mut Rng) -> Result<TraceSet> {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..set.n).partition(|&i| set.labels[i] == c);
    if pos.is_empty() {
        return Err(Error::input(format!("class {c} absent from training set")));
    }
    if neg.is_empty() {
        return Err(Error::input(format!("no traces outside class {c}")));
    }
    let k = pos.len().min(neg.len());
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut rows: Vec<usize> = pos[..k].iter().chain(&neg[..k]).copied().collect();
    rows.shuffle(rng);
    let mut out = set.subset(&rows);
    for l in out.labels.iter_mut() {
        *l = if *l == c { TARGET } else { REST };
    }
    out.meta.m = 2;
    Ok(out)
}

/// A balanced batch of at most `size` rows (half per OvA side), in set order.
pub fn balanced_batch(ova: &TraceSet, size: usize) -> Result<Batch> {
    let half = size / 2;
    let mut taken = [0usize; 2];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..ova.n {
        let l = usize::from(ova.labels[i]);
        if taken[l] < half {
            taken[l] += 1;
            rows.push(ova.row_f64(i));
            labels.push(l);
        }
    }
    Batch::new(rows, labels, 2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubModel {
    pub class_id: u8,
    pub genome: Genome,
    pub trace: Vec<TraceRow>,
    pub stop_reason: StopReason,
    pub generations: u32,
    pub species: usize,
    /// Ids of the traces the sub-model was trained on.
    #[serde(skip)]
    pub training_ids: BTreeSet<u64>,
}

/// Evolves the class-`c` sub-model on a balanced OvA batch drawn from `set`.
pub fn train_sub_model(c: u8, set: &TraceSet, config: &TrainConfig, rng: &mut Rng) -> Result<SubModel> {
    config.validate()?;
    let ova = build_ova_dataset(set, c, rng)?;
    let batch = balanced_batch(&ova, config.evolution.batch_size)?;
    let outcome = run_evolution(&batch, set.f, &config.evolution, &config.criteria, rng)?;
    Ok(SubModel {
        class_id: c,
        stop_reason: outcome.decision.reason.expect("runs always stop with a reason"),
        genome: outcome.genome,
        trace: outcome.trace,
        generations: outcome.generations,
        species: outcome.species,
        training_ids: ova.ids.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub m: usize,
}

/// Feature `c` of a row is sub-model `c`'s target-class confidence.
fn meta_features(networks: &[Network], row: &[f64]) -> Result<Vec<f64>> {
    networks.iter().map(|n| Ok(n.forward(row)?[usize::from(TARGET)])).collect()
}

/// Meta features for every trace of `holdout` (already scaled).
pub fn build_meta_dataset(sub_models: &[SubModel], holdout: &TraceSet) -> Result<MetaDataset> {
    let networks = sub_models.iter().map(|s| s.genome.compile()).collect::<Result<Vec<_>>>()?;
    let features = (0..holdout.n)
        .into_par_iter()
        .map(|i| meta_features(&networks, &holdout.row_f64(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaDataset { features, labels: holdout.labels.iter().map(|l| usize::from(*l)).collect(), m: holdout.meta.m })
}

/// Multinomial logistic regression: `softmax(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLearner {
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
}

impl MetaLearner {
    pub fn zeros(m: usize, d: usize) -> Self {
        MetaLearner { weights: vec![vec![0.0; d]; m], intercepts: vec![0.0; m] }
    }

    pub fn n_features(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.intercepts)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features() {
            return Err(Error::input(format!("meta input width {} != {}", x.len(), self.n_features())));
        }
        Ok(stable_softmax(&self.logits(x)))
    }

    fn objective(&self, meta: &MetaDataset, l2: f64) -> f64 {
        let n = meta.features.len() as f64;
        let ce: f64 = meta
            .features
            .iter()
            .zip(&meta.labels)
            .map(|(x, y)| {
                let z = self.logits(x);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - z[*y]
            })
            .sum();
        let reg: f64 = self.weights.iter().flatten().map(|w| w * w).sum();
        ce / n + 0.5 * l2 * reg
    }

    fn gradient(&self, meta: &MetaDataset, l2: f64) -> MetaLearner {
        let n = meta.features.len() as f64;
        let mut g = MetaLearner::zeros(self.weights.len(), self.n_features());
        for (x, y) in meta.features.iter().zip(&meta.labels) {
            let p = stable_softmax(&self.logits(x));
            for (j, pj) in p.iter().enumerate() {
                let r = (pj - if j == *y { 1.0 } else { 0.0 }) / n;
                g.intercepts[j] += r;
                for (gw, xv) in g.weights[j].iter_mut().zip(x) {
                    *gw += r * xv;
                }
            }
        }
        for (gw, w) in g.weights.iter_mut().flatten().zip(self.weights.iter().flatten()) {
            *gw += l2 * w;
        }
        g
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(&self.intercepts)
    }

    fn stepped(&self, g: &MetaLearner, step: f64) -> MetaLearner {
        MetaLearner {
            weights: self
                .weights
                .iter()
                .zip(&g.weights)
                .map(|(w, d)| w.iter().zip(d).map(|(a, b)| a - step * b).collect())
                .collect(),
            intercepts: self.intercepts.iter().zip(&g.intercepts).map(|(a, b)| a - step * b).collect(),
        }
    }
}

/// Fitted meta-learner with the objective value before the first step and
/// after each accepted step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaFit {
    pub learner: MetaLearner,
    pub losses: Vec<f64>,
}

/// Gradient descent with Armijo backtracking on the L2-regularized mean
/// cross-entropy. Stops after `max_iters` steps, when the objective improves
/// by less than `tol`, or when no step decreases it.
pub fn train_meta_learner(meta: &MetaDataset, l2: f64, max_iters: usize, tol: f64) -> Result<MetaFit> {
    if meta.features.is_empty() {
        return Err(Error::input("empty meta dataset"));
    }
    let distinct: BTreeSet<usize> = meta.labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::input("meta dataset needs at least two classes"));
    }
    if meta.labels.iter().any(|l| *l >= meta.m) {
        return Err(Error::input("meta label out of range"));
    }
    let d = meta.features[0].len();
    if meta.features.iter().any(|x| x.len() != d) {
        return Err(Error::size("ragged meta features"));
    }

    let mut learner = MetaLearner::zeros(meta.m, d);
    let mut loss = learner.objective(meta, l2);
    let mut losses = vec![loss];
    let mut step = 1.0;
    for _ in 0..max_iters {
        let g = learner.gradient(meta, l2);
        let g2: f64 = g.params().map(|v| v * v).sum();
        if g2 == 0.0 {
            break;
        }
        let mut accepted = None;
        for _ in 0..60 {
            let trial = learner.stepped(&g, step);
            let trial_loss = trial.objective(meta, l2);
            if trial_loss <= loss - 1e-4 * step * g2 {
                accepted = Some((trial, trial_loss));
                break;
            }
            step *= 0.5;
        }
        let Some((next, next_loss)) = accepted else { break };
        let improvement = loss - next_loss;
        learner = next;
        loss = next_loss;
        losses.push(loss);
        step *= 2.0;
        if improvement < tol {
            break;
        }
    }
    Ok(MetaFit { learner, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: String,
    pub output_index: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { kind: "own_class_confidence".into(), output_index: usize::from(TARGET) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubModelRecord {
    pub class_id: u8,
    pub genome: GenomeRecord,
    pub stop_reason: StopReason,
    pub generations: u32,
    pub species: usize,
    pub trace: Vec<TraceRow>,
}

pub const MODEL_FORMAT: &str = "infoneat.stacked";
pub const MODEL_VERSION: u32 = 1;

/// Scaler, sub-models and meta-learner. Raw traces go in, a length-`m`
/// class probability vector comes out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedModel {
    pub format: String,
    pub version: u32,
    pub m: usize,
    pub n_features: usize,
    pub scaler: FeatureScaler,
    pub sub_models: Vec<SubModelRecord>,
    pub meta: MetaLearner,
    pub feature_spec: FeatureSpec,
    pub config_fingerprint: String,
}

impl StackedModel {
    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::input(format!("unsupported model {} v{}", self.format, self.version)));
        }
        if self.sub_models.len() != self.m || self.meta.weights.len() != self.m || self.meta.n_features() != self.m {
            return Err(Error::size("sub-model and meta-learner counts disagree with m"));
        }
        if self.scaler.min.len() != self.n_features {
            return Err(Error::size("scaler width disagrees with n_features"));
        }
        for (c, s) in self.sub_models.iter().enumerate() {
            if usize::from(s.class_id) != c {
                return Err(Error::input("sub-models out of class order"));
            }
            let g = s.genome.clone().into_genome()?;
            if g.n_inputs != self.n_features || g.n_outputs != 2 {
                return Err(Error::size(format!("sub-model {c} has the wrong interface")));
            }
        }
        Ok(())
    }

    pub fn compile(&self) -> Result<CompiledModel<'_>> {
        let networks = self
            .sub_models
            .iter()
            .map(|s| s.genome.genome.compile())
            .collect::<Result<Vec<_>>>()?;
        Ok(CompiledModel { model: self, networks })
    }

    /// Class probabilities for one raw trace.
    pub fn predict(&self, trace: &[f64]) -> Result<Vec<f64>> {
        self.compile()?.predict(trace)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<StackedModel> {
        let model: StackedModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<StackedModel> {
        StackedModel::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn genomes(&self) -> impl Iterator<Item = &Genome> {
        self.sub_models.iter().map(|s| &s.genome.genome)
    }
}

pub struct CompiledModel<'a> {
    model: &'a StackedModel,
    networks: Vec<Network>,
}

impl CompiledModel<'_> {
    pub fn meta_features(&self, trace: &[f64]) -> Result<Vec<f64>> {
        if trace.len() != self.model.n_features {
            return Err(Error::input(format!(
                "trace width {} differs from model width {}",
                trace.len(),
                self.model.n_features
            )));
        }
        meta_features(&self.networks, &self.model.scaler.scale_row(trace))
    }

    pub fn predict(&self, trace: &[f64]) -> Result<Vec<f64>> {
        self.model.meta.predict(&self.meta_features(trace)?)
    }

    /// Predictions for every row of a raw trace set.
    pub fn predict_set(&self, set: &TraceSet) -> Result<Vec<Vec<f64>>> {
        (0..set.n).into_par_iter().map(|i| self.predict(&set.row_f64(i))).collect()
    }
}

/// Trained model with per-class training diagnostics.
#[derive(Debug, Clone)]
pub struct TrainedStack {
    pub model: StackedModel,
    pub sub_models: Vec<SubModel>,
    pub meta_losses: Vec<f64>,
    pub holdout_ids: BTreeSet<u64>,
}

/// Splits each class into sub-model training rows and stacking holdout rows
/// (the last rows of the class in the given order).
fn holdout_split(set: &TraceSet, config: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (c, mut rows) in set.indices_by_class().into_iter().enumerate() {
        if let Some(cap) = config.per_class_cap {
            rows.truncate(cap);
        }
        let h = match config.holdout_per_class {
            Some(h) => h,
            None => (rows.len() as f64 * config.holdout_fraction).round() as usize,
        };
        if rows.is_empty() || h == 0 || h >= rows.len() {
            return Err(Error::input(format!("class {c} has {} traces, cannot hold out {h}", rows.len())));
        }
        let cut = rows.len() - h;
        holdout.extend_from_slice(&rows[cut..]);
        train.extend_from_slice(&rows[..cut]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    Ok((train, holdout))
}

fn with_workers<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(job());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Full training pipeline on a raw, labelled set: fit the scaler, shuffle,
/// split off the stacking holdout, evolve one sub-model per class in
/// parallel, then fit the meta-learner on holdout predictions. Sub-model `c`
/// draws from stream `("sub-model", c)` of `seed`.
pub fn train_stacked(set: &TraceSet, config: &TrainConfig, seed: u64) -> Result<TrainedStack> {
    config.validate()?;
    set.validate()?;
    let scaler = FeatureScaler::fit(set)?;
    let (scaled, _) = scaler.apply(set)?;
    let (shuffled, _) = shuffle(&scaled, &mut derive_rng(seed, "shuffle", 0));
    let (train_rows, holdout_rows) = holdout_split(&shuffled, config)?;
    let train = shuffled.subset(&train_rows);
    let holdout = shuffled.subset(&holdout_rows);
    let m = set.meta.m;

    let sub_models = with_workers(config.workers, || {
        (0..m)
            .into_par_iter()
            .map(|c| train_sub_model(c as u8, &train, config, &mut derive_rng(seed, "sub-model", c as u64)))
            .collect::<Result<Vec<_>>>()
    })??;

    let holdout_ids: BTreeSet<u64> = holdout.ids.iter().copied().collect();
    if sub_models.iter().any(|s| !s.training_ids.is_disjoint(&holdout_ids)) {
        return Err(Error::Structure("stacking holdout overlaps sub-model training data".into()));
    }

    let meta = build_meta_dataset(&sub_models, &holdout)?;
    let fit = train_meta_learner(&meta, config.meta_l2, config.meta_max_iters, config.meta_tol)?;
    let model = StackedModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        m,
        n_features: set.f,
        scaler,
        sub_models: sub_models
            .iter()
            .map(|s| SubModelRecord {
                class_id: s.class_id,
                genome: s.genome.to_record(),
                stop_reason: s.stop_reason,
                generations: s.generations,
                species: s.species,
                trace: s.trace.clone(),
            })
            .collect(),
        meta: fit.learner,
        feature_spec: FeatureSpec::default(),
        config_fingerprint: config.fingerprint(),
    };
    Ok(TrainedStack { model, sub_models, meta_losses: fit.losses, holdout_ids })
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub trained: TrainedStack,
    /// Row indices of the held-out fold in the input set.
    pub test_rows: Vec<usize>,
    pub test_accuracy: f64,
}

/// Stratified k-fold training: for each fold, train on the other `k − 1`
/// folds and measure accuracy on the held-out one.
pub fn kfold_train(set: &TraceSet, k: usize, config: &TrainConfig, seed: u64) -> Result<Vec<FoldResult>> {
    let folds = kfold_split(set, k, &mut derive_rng(seed, "kfold", 0))?;
    let mut results = Vec::with_capacity(k);
    for (i, test_rows) in folds.iter().enumerate() {
        let train_rows: Vec<usize> =
            folds.iter().enumerate().filter(|(j, _)| *j != i).flat_map(|(_, f)| f.iter().copied()).collect();
        let train = set.subset(&train_rows);
        let trained = train_stacked(&train, config, derive_seed(seed, "fold", i as u64))?;
        let test = set.subset(test_rows);
        let compiled = trained.model.compile()?;
        let predictions = compiled.predict_set(&test)?;
        let correct = predictions
            .iter()
            .zip(&test.labels)
            .filter(|(p, l)| argmax(p) == usize::from(**l))
            .count();
        let accuracy = correct as f64 / test.n.max(1) as f64;
        results.push(FoldResult { fold: i, trained, test_rows: test_rows.clone(), test_accuracy: accuracy });
    }
    Ok(results)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i)
}
