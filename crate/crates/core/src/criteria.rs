//! Genome selection and stopping driven by fitness and layer-wise conditional
//! mutual information between successive generations.
//!
//! For a candidate genome and its reference ancestor, the quantity of interest
//! at layer `j` is `I(ŷʲ_candidate ; y | ŷʲ_ancestor)` estimated on a fixed
//! batch with matrix-based Rényi entropies. Layers are indexed from the output
//! side so genomes of different depths can be compared.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::entropy::{activation_gram, cmi, label_gram, ActivationKernel, GramMatrix, KernelSpec, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::evolution::{best_of, evolve_generation, Batch, EvolutionConfig, Population};
use crate::network::{forward_collect, Genome};
use crate::rng::Rng;

/// Kernel applied to each unit's activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum UnitKernel {
    MedianGaussian,
    Gaussian { bandwidth: f64 },
    Partition,
}

impl UnitKernel {
    fn to_activation_kernel(self) -> Result<ActivationKernel> {
        Ok(match self {
            UnitKernel::MedianGaussian => ActivationKernel::MedianGaussian,
            UnitKernel::Gaussian { bandwidth } => ActivationKernel::Fixed(KernelSpec::gaussian(bandwidth)?),
            UnitKernel::Partition => ActivationKernel::Fixed(KernelSpec::Partition),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriteriaConfig {
    pub alpha: f64,
    pub kernel: UnitKernel,
    /// Losses within this distance of the minimum count as tied.
    pub loss_tie_tolerance: f64,
}

impl Default for CriteriaConfig {
    fn default() -> Self {
        CriteriaConfig { alpha: DEFAULT_ALPHA, kernel: UnitKernel::MedianGaussian, loss_tie_tolerance: 0.0 }
    }
}

/// One layer's unit activations over the reference batch with their Gram
/// matrices.
#[derive(Debug, Clone)]
pub struct LayerProbe {
    pub columns: Vec<Vec<f64>>,
    pub grams: Vec<GramMatrix>,
}

/// All layers of a genome evaluated on the reference batch, input side first
/// and the output probabilities last.
#[derive(Debug, Clone)]
pub struct GenomeProbe {
    pub genome_id: u64,
    pub layers: Vec<LayerProbe>,
}

impl GenomeProbe {
    pub fn new(genome: &Genome, batch: &Batch, config: &CriteriaConfig) -> Result<GenomeProbe> {
        let kernel = config.kernel.to_activation_kernel()?;
        let acts = forward_collect(genome, &batch.rows)?;
        let layers = acts
            .groups
            .into_iter()
            .map(|g| {
                let grams = activation_gram(&g.columns, kernel)?;
                Ok(LayerProbe { columns: g.columns, grams })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GenomeProbe { genome_id: genome.id, layers })
    }

    /// Layer count including the output layer.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `k = 0` is the output layer, `k = 1` the last hidden layer, and so on.
    pub fn from_output(&self, k: usize) -> Option<&LayerProbe> {
        self.layers.len().checked_sub(k + 1).map(|i| &self.layers[i])
    }
}

fn same_column(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// `I(candidate ; labels | ancestor)` for one layer. Candidate units whose
/// activations reproduce an ancestor unit bit for bit are dropped first, and
/// the result is exactly 0 when nothing remains.
pub fn layer_cmi(candidate: &LayerProbe, ancestor: &LayerProbe, labels: &GramMatrix, alpha: f64) -> Result<f64> {
    let fresh: Vec<&GramMatrix> = candidate
        .columns
        .iter()
        .zip(&candidate.grams)
        .filter(|(col, _)| !ancestor.columns.iter().any(|a| same_column(col, a)))
        .map(|(_, g)| g)
        .collect();
    if fresh.is_empty() {
        return Ok(0.0);
    }
    let given: Vec<&GramMatrix> = ancestor.grams.iter().collect();
    cmi(&fresh, labels, &given, alpha)
}

/// Result of genome selection with the layers that were consulted.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub selected: Genome,
    /// Ids of all loss-minimizers.
    pub tied: Vec<u64>,
    /// Layers consulted, as offsets from the output layer, in order.
    pub layers_examined: Vec<usize>,
    /// CMI per consulted layer for each candidate still in contention there.
    pub cmi_by_layer: Vec<BTreeMap<u64, f64>>,
}

const CMI_TIE: f64 = 1e-12;

/// Returns the loss-minimizer; ties are broken by the smallest CMI against
/// each candidate's ancestor, consulting layers from the output side inward,
/// and finally by the smallest genome id. If any tied candidate has no
/// ancestor the CMI stage is skipped.
pub fn select_best_genome<'a, F>(
    candidates: &[Genome],
    ancestor_of: F,
    batch: &Batch,
    config: &CriteriaConfig,
) -> Result<SelectionReport>
where
    F: Fn(&Genome) -> Option<&'a Genome>,
{
    let best = best_of(candidates).ok_or_else(|| Error::input("no candidate genomes"))?;
    let min_loss = best.loss();
    let mut tied: Vec<&Genome> = candidates
        .iter()
        .filter(|g| g.loss() <= min_loss + config.loss_tie_tolerance)
        .collect();
    tied.sort_by_key(|g| g.id);
    let mut report = SelectionReport {
        selected: best.clone(),
        tied: tied.iter().map(|g| g.id).collect(),
        layers_examined: Vec::new(),
        cmi_by_layer: Vec::new(),
    };
    if tied.len() == 1 {
        return Ok(report);
    }
    let ancestors: Option<Vec<&Genome>> = tied.iter().map(|g| ancestor_of(g)).collect();
    let Some(ancestors) = ancestors else {
        report.selected = tied[0].clone();
        return Ok(report);
    };

    let labels = label_gram(&batch.labels)?;
    let mut probes = Vec::with_capacity(tied.len());
    for (g, a) in tied.iter().zip(&ancestors) {
        probes.push((GenomeProbe::new(g, batch, config)?, GenomeProbe::new(a, batch, config)?));
    }
    let depth = probes.iter().map(|(c, a)| c.depth().min(a.depth())).min().unwrap_or(0);

    let mut alive: Vec<usize> = (0..tied.len()).collect();
    for k in 0..depth {
        report.layers_examined.push(k);
        let mut scores = BTreeMap::new();
        for &i in &alive {
            let (c, a) = &probes[i];
            let value = layer_cmi(
                c.from_output(k).expect("k below depth"),
                a.from_output(k).expect("k below depth"),
                &labels,
                config.alpha,
            )?;
            scores.insert(tied[i].id, value);
        }
        let min = scores.values().copied().fold(f64::INFINITY, f64::min);
        alive.retain(|i| scores[&tied[*i].id] <= min + CMI_TIE);
        report.cmi_by_layer.push(scores);
        if alive.len() == 1 {
            break;
        }
    }
    report.selected = tied[alive[0]].clone();
    Ok(report)
}

/// The selected genome of a generation together with its probe and the
/// last-layer CMI against its ancestor (absent in the first generation).
#[derive(Debug, Clone)]
pub struct GenerationSnapshot {
    pub generation: u32,
    pub best: Genome,
    pub probe: GenomeProbe,
    pub best_loss: f64,
    pub cmi: Option<f64>,
}

impl GenerationSnapshot {
    pub fn new(
        generation: u32,
        best: Genome,
        ancestor: Option<&Genome>,
        batch: &Batch,
        config: &CriteriaConfig,
    ) -> Result<GenerationSnapshot> {
        let probe = GenomeProbe::new(&best, batch, config)?;
        let cmi = match ancestor {
            Some(a) => {
                let parent = GenomeProbe::new(a, batch, config)?;
                let labels = label_gram(&batch.labels)?;
                Some(layer_cmi(
                    probe.from_output(0).expect("output layer"),
                    parent.from_output(0).expect("output layer"),
                    &labels,
                    config.alpha,
                )?)
            }
            None => None,
        };
        Ok(GenerationSnapshot { generation, best_loss: best.loss(), best, probe, cmi })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LossDegraded,
    CmiIncreased,
    MaxGenerations,
    FitnessThreshold,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::LossDegraded => "loss_degraded",
            StopReason::CmiIncreased => "cmi_increased",
            StopReason::MaxGenerations => "max_generations",
            StopReason::FitnessThreshold => "fitness_threshold",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub genome_id: u64,
    pub loss: f64,
    pub cmi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopDecision {
    pub stopped: bool,
    pub reason: Option<StopReason>,
    pub final_genome: Option<Genome>,
    /// Offspring that caused the stop. For a loss stop this lists every
    /// offspring whose loss exceeds the current best.
    pub triggers: Vec<Trigger>,
}

impl StopDecision {
    fn go_on() -> Self {
        StopDecision { stopped: false, reason: None, final_genome: None, triggers: Vec::new() }
    }

    pub fn stop(reason: StopReason, genome: Genome, triggers: Vec<Trigger>) -> Self {
        StopDecision { stopped: true, reason: Some(reason), final_genome: Some(genome), triggers }
    }
}

/// Polls the offspring in id order. The first one with a strictly larger loss
/// than the current best stops with `LossDegraded`; otherwise one whose
/// output-layer CMI against the current best exceeds the current CMI stops
/// with `CmiIncreased`. Either way the current best is returned.
pub fn should_stop(
    current: &GenerationSnapshot,
    offspring: &[Genome],
    batch: &Batch,
    config: &CriteriaConfig,
) -> Result<StopDecision> {
    let cmi_t = match (current.generation, current.cmi) {
        (g, Some(c)) if g >= 2 => c,
        _ => return Err(Error::input("stopping needs a snapshot from generation 2 or later")),
    };
    let mut order: Vec<&Genome> = offspring.iter().collect();
    order.sort_by_key(|g| g.id);
    let labels = label_gram(&batch.labels)?;
    let reference = current.probe.from_output(0).expect("output layer");

    for g in &order {
        if current.best_loss < g.loss() {
            let triggers = order
                .iter()
                .filter(|o| current.best_loss < o.loss())
                .map(|o| Trigger { genome_id: o.id, loss: o.loss(), cmi: None })
                .collect();
            return Ok(StopDecision::stop(StopReason::LossDegraded, current.best.clone(), triggers));
        }
        let probe = GenomeProbe::new(g, batch, config)?;
        let value = layer_cmi(probe.from_output(0).expect("output layer"), reference, &labels, config.alpha)?;
        if cmi_t < value {
            let trigger = Trigger { genome_id: g.id, loss: g.loss(), cmi: Some(value) };
            return Ok(StopDecision::stop(StopReason::CmiIncreased, current.best.clone(), vec![trigger]));
        }
    }
    Ok(StopDecision::go_on())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub generation: u32,
    pub best_loss: f64,
    pub last_layer_cmi: Option<f64>,
}

pub const TRACE_HEADER: &str = "generation,best_loss,last_layer_cmi";

/// CSV with one row per generation; a missing CMI is an empty field.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let cmi = r.last_layer_cmi.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.generation, r.best_loss, cmi);
    }
    out
}

pub fn trace_from_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::input("training trace header mismatch"));
    }
    let bad = |line: &str| Error::input(format!("malformed training trace row: {line:?}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(bad(line));
            }
            let generation = fields[0].parse().map_err(|_| bad(line))?;
            let best_loss = fields[1].parse().map_err(|_| bad(line))?;
            let last_layer_cmi = match fields[2] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad(line))?),
            };
            Ok(TraceRow { generation, best_loss, last_layer_cmi })
        })
        .collect()
}

/// Outcome of a full evolution run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub genome: Genome,
    pub decision: StopDecision,
    pub trace: Vec<TraceRow>,
    pub generations: u32,
    /// Species alive in the final generation.
    pub species: usize,
}

/// Ancestor of a genome in the previous generation: the elite of the species
/// its lineage came from, else the previous overall best.
fn ancestor_in<'a>(genome: &Genome, previous: &'a Population) -> &'a Genome {
    let lineage = std::iter::once(genome.id).chain(genome.parents.iter().copied());
    lineage
        .filter_map(|id| previous.species_of(id))
        .map(|s| s.best())
        .next()
        .unwrap_or_else(|| previous.best())
}

/// Runs evolution on `batch` until a stopping rule fires: loss degradation,
/// CMI increase, the fitness threshold, or the generation limit.
pub fn run_evolution(
    batch: &Batch,
    n_inputs: usize,
    evolution: &EvolutionConfig,
    criteria: &CriteriaConfig,
    rng: &mut Rng,
) -> Result<RunOutcome> {
    let mut pop = Population::initialize(n_inputs, batch.n_classes, batch, evolution, rng)?;
    let genomes: Vec<Genome> = pop.genomes().cloned().collect();
    let first = select_best_genome(&genomes, |_| None, batch, criteria)?.selected;
    let mut trace = vec![TraceRow { generation: 1, best_loss: first.loss(), last_layer_cmi: None }];
    let finish = |genome: Genome, reason, trace, generations, species| RunOutcome {
        decision: StopDecision::stop(reason, genome.clone(), Vec::new()),
        genome,
        trace,
        generations,
        species,
    };
    if first.loss() <= evolution.fitness_threshold {
        return Ok(finish(first, StopReason::FitnessThreshold, trace, 1, pop.species.len()));
    }
    if evolution.max_generations <= 1 {
        return Ok(finish(first, StopReason::MaxGenerations, trace, 1, pop.species.len()));
    }

    let mut previous = pop;
    pop = evolve_generation(&previous, batch, evolution, rng)?;
    loop {
        let t = pop.generation;
        let genomes: Vec<Genome> = pop.genomes().cloned().collect();
        let selection = select_best_genome(&genomes, |g| Some(ancestor_in(g, &previous)), batch, criteria)?;
        let best = selection.selected;
        let ancestor = ancestor_in(&best, &previous);
        let snapshot = GenerationSnapshot::new(t, best.clone(), Some(ancestor), batch, criteria)?;
        trace.push(TraceRow { generation: t, best_loss: snapshot.best_loss, last_layer_cmi: snapshot.cmi });

        if best.loss() <= evolution.fitness_threshold {
            return Ok(finish(best, StopReason::FitnessThreshold, trace, t, pop.species.len()));
        }
        if t >= evolution.max_generations {
            return Ok(finish(best, StopReason::MaxGenerations, trace, t, pop.species.len()));
        }

        let next = evolve_generation(&pop, batch, evolution, rng)?;
        let species_id = pop.species_of(best.id).map(|s| s.id);
        let polled: Vec<Genome> = match species_id.and_then(|id| next.species.iter().find(|s| s.id == id)) {
            Some(s) => s.members.clone(),
            None => next.genomes().cloned().collect(),
        };
        let decision = should_stop(&snapshot, &polled, batch, criteria)?;
        if decision.stopped {
            return Ok(RunOutcome { genome: best, decision, trace, generations: t, species: pop.species.len() });
        }
        previous = pop;
        pop = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{InitSpec, NodeKind};
    use crate::rng::seeded;

    fn batch() -> Batch {
        let rows: Vec<Vec<f64>> = (0..24).map(|i| vec![(i % 2) as f64 + 0.01 * i as f64, ((i / 2) % 3) as f64]).collect();
        let labels = (0..24).map(|i| i % 2).collect();
        Batch::new(rows, labels, 2).unwrap()
    }

    fn genome(id: u64, seed: u64, loss: f64) -> Genome {
        let init = InitSpec::xavier(2, 2, 3);
        let mut g = Genome::new_minimal(2, 2, 3, &init, &mut seeded(seed)).unwrap();
        g.id = id;
        g.fitness = Some(loss);
        g
    }

    /// Constant outputs, so conditioning on it carries no information.
    fn flat(id: u64, loss: f64) -> Genome {
        let mut g = genome(id, 1, loss);
        g.connections.iter_mut().for_each(|c| c.weight = 0.0);
        g.nodes.iter_mut().for_each(|n| n.bias = 0.0);
        g
    }

    fn partition() -> CriteriaConfig {
        CriteriaConfig { kernel: UnitKernel::Partition, ..Default::default() }
    }

    #[test]
    fn strict_minimizer_skips_cmi() {
        let cands = vec![genome(0, 1, 0.5), genome(1, 2, 0.3), genome(2, 3, 0.4)];
        let r = select_best_genome(&cands, |_| panic!("no lineage lookup expected"), &batch(), &partition()).unwrap();
        assert_eq!(r.selected.id, 1);
        assert!(r.layers_examined.is_empty());
    }

    #[test]
    fn clone_beats_mutant_on_ties() {
        let parent = flat(0, 0.4);
        let mut clone = parent.clone();
        clone.id = 7;
        let mut mutant = genome(3, 1, 0.4);
        mutant.id = 3;
        let cands = vec![mutant, clone];
        let b = batch();
        for cfg in [partition(), CriteriaConfig::default()] {
            let r = select_best_genome(&cands, |_| Some(&parent), &b, &cfg).unwrap();
            assert_eq!(r.selected.id, 7);
            assert_eq!(r.cmi_by_layer[0][&7], 0.0);
            assert!(r.cmi_by_layer[0][&3] > 0.0);
        }
    }

    #[test]
    fn full_tie_falls_back_to_lowest_id() {
        let parent = genome(0, 1, 0.4);
        let cands: Vec<Genome> = [9, 4, 6].iter().map(|id| { let mut g = parent.clone(); g.id = *id; g }).collect();
        let r = select_best_genome(&cands, |_| Some(&parent), &batch(), &partition()).unwrap();
        assert_eq!(r.selected.id, 4);
        assert_eq!(r.layers_examined, vec![0, 1]);
    }

    #[test]
    fn tie_at_output_broken_one_layer_down() {
        // Outputs are constant (zero outgoing weights), so the output layer
        // ties and the hidden layer decides.
        let mut parent = genome(0, 1, 0.4);
        let hidden_ids: Vec<u32> = parent.nodes.iter().filter(|n| n.kind == NodeKind::Hidden).map(|n| n.id).collect();
        for c in parent.connections.iter_mut().filter(|c| hidden_ids.contains(&c.from)) {
            c.weight = 0.0;
        }
        let mut a = parent.clone();
        a.id = 1;
        let mut b = parent.clone();
        b.id = 2;
        for c in b.connections.iter_mut().filter(|c| hidden_ids.contains(&c.to)) {
            c.weight *= -1.5;
        }
        let r = select_best_genome(&[b, a], |_| Some(&parent), &batch(), &partition()).unwrap();
        assert_eq!(r.layers_examined, vec![0, 1]);
        assert_eq!(r.selected.id, 1);
    }

    fn snapshot(loss: f64, cmi_value: f64) -> (GenerationSnapshot, Genome) {
        let best = flat(1, loss);
        let mut snap = GenerationSnapshot::new(2, best.clone(), Some(&best), &batch(), &partition()).unwrap();
        snap.cmi = Some(cmi_value);
        (snap, best)
    }

    #[test]
    fn worse_offspring_stops_on_loss() {
        let (snap, best) = snapshot(0.3, 0.0);
        let offspring = vec![genome(4, 6, 0.35), best.clone(), genome(5, 7, 0.5)];
        let d = should_stop(&snap, &offspring, &batch(), &partition()).unwrap();
        assert_eq!(d.reason, Some(StopReason::LossDegraded));
        assert_eq!(d.final_genome.unwrap().id, best.id);
        assert!(d.triggers.iter().all(|t| snap.best_loss <= t.loss));
        assert_eq!(d.triggers.len(), 2);
    }

    #[test]
    fn cmi_rise_stops() {
        let (snap, _) = snapshot(0.3, 0.0);
        let d = should_stop(&snap, &[genome(4, 9, 0.2)], &batch(), &partition()).unwrap();
        assert_eq!(d.reason, Some(StopReason::CmiIncreased));
        assert!(d.triggers[0].cmi.unwrap() > 0.0);
    }

    #[test]
    fn improving_offspring_continue() {
        let (snap, best) = snapshot(0.3, 0.5);
        let mut same = best.clone();
        same.id = 9;
        same.fitness = Some(0.25);
        let d = should_stop(&snap, &[best, same], &batch(), &partition()).unwrap();
        assert!(!d.stopped);
    }

    #[test]
    fn stopping_requires_second_generation() {
        let (mut snap, best) = snapshot(0.3, 0.0);
        snap.cmi = None;
        assert!(should_stop(&snap, &[best], &batch(), &partition()).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        assert_eq!(trace_to_csv(&[]), format!("{TRACE_HEADER}\n"));
        assert!(trace_from_csv(&trace_to_csv(&[])).unwrap().is_empty());
        let rows: Vec<TraceRow> = (1..=8)
            .map(|g| TraceRow {
                generation: g,
                best_loss: 1.0 / (g as f64 + 0.1),
                last_layer_cmi: (g > 1).then(|| 0.1 * g as f64 / 3.0),
            })
            .collect();
        let text = trace_to_csv(&rows);
        assert_eq!(text.lines().count(), 9);
        assert_eq!(trace_from_csv(&text).unwrap(), rows);
    }

    #[test]
    fn run_stops_within_limit() {
        let cfg = EvolutionConfig { population_size: 8, n_hidden: 3, max_generations: 6, ..Default::default() };
        let out = run_evolution(&batch(), 2, &cfg, &CriteriaConfig::default(), &mut seeded(3)).unwrap();
        assert!(out.generations <= 6);
        assert_eq!(out.trace.len() as u32, out.generations);
        assert!(out.decision.stopped);
        assert_eq!(out.genome.loss(), out.trace.last().unwrap().best_loss);
    }
}
