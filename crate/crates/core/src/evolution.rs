//! The NEAT loop: fitness evaluation, speciation, tournament selection,
//! crossover aligned on innovation numbers, and structural/weight mutation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    assign_layers, choose, Activation, ConnectionGene, Genome, InitSpec, NodeGene, NodeId, NodeKind,
};
use crate::rng::Rng;

/// Log-loss clipping bound.
pub const LOSS_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub compatibility_threshold: f64,
    pub n_hidden: usize,
    pub fitness_threshold: f64,
    pub connection_add_prob: f64,
    pub node_add_prob: f64,
    pub max_generations: u32,
    pub weight_mutate_rate: f64,
    pub bias_mutate_rate: f64,
    pub weight_mutate_power: f64,
    pub disjoint_coefficient: f64,
    pub weight_coefficient: f64,
    pub tournament_size: usize,
    pub crossover_prob: f64,
    pub batch_size: usize,
    pub target_species: usize,
    pub threshold_step: f64,
    pub min_threshold: f64,
    pub stagnation_limit: u32,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population_size: 16,
            compatibility_threshold: 1.8,
            n_hidden: 10,
            fitness_threshold: 0.0,
            connection_add_prob: 0.8,
            node_add_prob: 1.0,
            max_generations: 30,
            weight_mutate_rate: 0.8,
            bias_mutate_rate: 0.7,
            weight_mutate_power: 0.5,
            disjoint_coefficient: 1.0,
            weight_coefficient: 0.5,
            tournament_size: 3,
            crossover_prob: 0.75,
            batch_size: 150,
            target_species: 4,
            threshold_step: 0.1,
            min_threshold: 0.1,
            stagnation_limit: 15,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("connection_add_prob", self.connection_add_prob),
            ("node_add_prob", self.node_add_prob),
            ("weight_mutate_rate", self.weight_mutate_rate),
            ("bias_mutate_rate", self.bias_mutate_rate),
            ("crossover_prob", self.crossover_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.population_size < 2 {
            return Err(Error::Config("population_size must be at least 2".into()));
        }
        if self.max_generations < 1 {
            return Err(Error::Config("max_generations must be at least 1".into()));
        }
        if !(self.compatibility_threshold > 0.0) {
            return Err(Error::Config("compatibility_threshold must be positive".into()));
        }
        if self.tournament_size == 0 || self.batch_size < 2 {
            return Err(Error::Config("tournament_size must be >= 1 and batch_size >= 2".into()));
        }
        if !(self.weight_mutate_power >= 0.0) {
            return Err(Error::Config("weight_mutate_power must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rows of features with integer class labels (one-hot implied).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Batch {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Batch> {
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(Error::size(format!(
                "batch has {} rows and {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|l| *l >= n_classes) {
            return Err(Error::input("batch label out of range"));
        }
        Ok(Batch { rows, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Mean categorical cross-entropy with predictions clipped to `[ε, 1−ε]`.
pub fn log_loss(genome: &Genome, batch: &Batch) -> Result<f64> {
    let net = genome.compile()?;
    if net.n_outputs() != batch.n_classes {
        return Err(Error::size(format!(
            "genome has {} outputs but labels have width {}",
            net.n_outputs(),
            batch.n_classes
        )));
    }
    let mut total = 0.0;
    for (row, label) in batch.rows.iter().zip(&batch.labels) {
        let p = net.forward(row)?;
        total -= p[*label].clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON).ln();
    }
    Ok(total / batch.len() as f64)
}

/// `c1 · disjoint / |union| + c2 · mean |Δw|` over connection genes aligned
/// by innovation number.
pub fn genomic_distance(a: &Genome, b: &Genome, config: &EvolutionConfig) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (ca, cb) = (&a.connections, &b.connections);
    let mut disjoint = 0usize;
    let mut matching = 0usize;
    let mut weight_diff = 0.0;
    while i < ca.len() && j < cb.len() {
        match ca[i].innovation.cmp(&cb[j].innovation) {
            std::cmp::Ordering::Equal => {
                matching += 1;
                weight_diff += (ca[i].weight - cb[j].weight).abs();
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => {
                disjoint += 1;
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                disjoint += 1;
                j += 1;
            }
        }
    }
    disjoint += (ca.len() - i) + (cb.len() - j);
    let union = matching + disjoint;
    if union == 0 {
        return 0.0;
    }
    let structural = config.disjoint_coefficient * disjoint as f64 / union as f64;
    let weights = if matching > 0 {
        config.weight_coefficient * weight_diff / matching as f64
    } else {
        0.0
    };
    structural + weights
}

/// Historical markings. Connection innovations are keyed by `(from, to)` for
/// the whole run; node splits are keyed by the split connection's innovation
/// and reset every generation, so identical splits within one generation share
/// the new node id and both new innovations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnovationRegistry {
    next_innovation: u64,
    next_node: NodeId,
    connections: BTreeMap<(NodeId, NodeId), u64>,
    splits: BTreeMap<u64, NodeId>,
}

impl InnovationRegistry {
    /// Seeds the registry with the genes of an initial genome.
    pub fn from_genome(genome: &Genome) -> Self {
        let connections: BTreeMap<_, _> = genome
            .connections
            .iter()
            .map(|c| ((c.from, c.to), c.innovation))
            .collect();
        InnovationRegistry {
            next_innovation: genome.connections.iter().map(|c| c.innovation + 1).max().unwrap_or(0),
            next_node: genome.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0),
            connections,
            splits: BTreeMap::new(),
        }
    }

    pub fn connection(&mut self, from: NodeId, to: NodeId) -> u64 {
        if let Some(inn) = self.connections.get(&(from, to)) {
            return *inn;
        }
        let inn = self.next_innovation;
        self.next_innovation += 1;
        self.connections.insert((from, to), inn);
        inn
    }

    /// Node id for splitting connection `innovation` in `genome`.
    pub fn split_node(&mut self, innovation: u64, genome: &Genome) -> NodeId {
        if let Some(id) = self.splits.get(&innovation) {
            if !genome.has_node(*id) {
                return *id;
            }
        }
        let id = self.next_node;
        self.next_node += 1;
        self.splits.insert(innovation, id);
        id
    }

    pub fn new_generation(&mut self) {
        self.splits.clear();
    }

    pub fn innovations_issued(&self) -> u64 {
        self.next_innovation
    }

    pub fn known_connections(&self) -> &BTreeMap<(NodeId, NodeId), u64> {
        &self.connections
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Species {
    pub id: u64,
    pub representative: Genome,
    pub members: Vec<Genome>,
}

impl Species {
    /// Lowest loss, ties to the lowest genome id.
    pub fn best(&self) -> &Genome {
        best_of(&self.members).expect("species are never empty")
    }

    pub fn mean_loss(&self) -> f64 {
        self.members.iter().map(Genome::loss).sum::<f64>() / self.members.len() as f64
    }
}

pub(crate) fn best_of(genomes: &[Genome]) -> Option<&Genome> {
    genomes
        .iter()
        .min_by(|a, b| a.loss().total_cmp(&b.loss()).then(a.id.cmp(&b.id)))
}

/// Greedy speciation. Each previous species first claims the unassigned
/// genome closest to its old representative (if within the threshold) as its
/// new representative; the remaining genomes join the first species whose
/// representative is within the threshold, or found a new species.
pub fn speciate(
    genomes: Vec<Genome>,
    threshold: f64,
    previous: &[(u64, Genome)],
    next_species_id: &mut u64,
    config: &EvolutionConfig,
) -> Vec<Species> {
    let mut pool: Vec<Option<Genome>> = genomes.into_iter().map(Some).collect();
    let mut species: Vec<Species> = Vec::new();
    for (id, old_rep) in previous {
        let closest = pool
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, genomic_distance(old_rep, g, config))))
            .filter(|(_, d)| *d < threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = closest {
            let rep = pool[i].take().expect("filtered on Some");
            species.push(Species { id: *id, representative: rep.clone(), members: vec![rep] });
        }
    }
    for genome in pool.into_iter().flatten() {
        match species
            .iter_mut()
            .find(|s| genomic_distance(&s.representative, &genome, config) < threshold)
        {
            Some(s) => s.members.push(genome),
            None => {
                let id = *next_species_id;
                *next_species_id += 1;
                species.push(Species { id, representative: genome.clone(), members: vec![genome] });
            }
        }
    }
    species
}

/// Best (lowest-loss) genome among `min(tournament_size, len)` members drawn
/// uniformly without replacement.
pub fn tournament_select<'a>(members: &'a [Genome], tournament_size: usize, rng: &mut Rng) -> &'a Genome {
    assert!(!members.is_empty(), "tournament over an empty species");
    let k = tournament_size.clamp(1, members.len());
    sample(rng, members.len(), k)
        .into_iter()
        .map(|i| &members[i])
        .min_by(|a, b| a.loss().total_cmp(&b.loss()).then(a.id.cmp(&b.id)))
        .expect("k >= 1")
}

/// Aligns connection genes on innovation number. Matching genes come from
/// either parent with equal probability; disjoint and excess genes of both
/// parents are appended in innovation order, skipping any that would close a
/// cycle. Parent `a`'s fields (id, interface) seed the child.
pub fn crossover(a: &Genome, b: &Genome, rng: &mut Rng) -> Genome {
    debug_assert_eq!((a.n_inputs, a.n_outputs), (b.n_inputs, b.n_outputs));
    let b_by_inn: BTreeMap<u64, &ConnectionGene> = b.connections.iter().map(|c| (c.innovation, c)).collect();
    let a_inns: BTreeSet<u64> = a.connections.iter().map(|c| c.innovation).collect();

    let mut child = Genome {
        id: a.id,
        n_inputs: a.n_inputs,
        n_outputs: a.n_outputs,
        nodes: Vec::new(),
        connections: Vec::new(),
        fitness: None,
        generation_born: a.generation_born.max(b.generation_born),
        parents: vec![a.id, b.id],
    };

    // Matching genes form a subgraph of parent `a`, hence acyclic.
    let mut disjoint: Vec<&ConnectionGene> = Vec::new();
    for ga in &a.connections {
        match b_by_inn.get(&ga.innovation) {
            Some(gb) => {
                let pick = if rng.random_bool(0.5) { ga } else { *gb };
                child.connections.push(pick.clone());
            }
            None => disjoint.push(ga),
        }
    }
    disjoint.extend(b.connections.iter().filter(|c| !a_inns.contains(&c.innovation)));
    disjoint.sort_by_key(|c| c.innovation);

    let mut nodes: BTreeMap<NodeId, NodeGene> = BTreeMap::new();
    let node_from = |id: NodeId, rng: &mut Rng| -> NodeGene {
        match (a.node(id), b.node(id)) {
            (Some(x), Some(y)) => if rng.random_bool(0.5) { x.clone() } else { y.clone() },
            (Some(x), None) => x.clone(),
            (None, Some(y)) => y.clone(),
            (None, None) => unreachable!("gene endpoints exist in their parent"),
        }
    };
    for n in a.nodes.iter().filter(|n| n.kind != NodeKind::Hidden) {
        let gene = node_from(n.id, rng);
        nodes.insert(n.id, gene);
    }
    let endpoints: Vec<NodeId> = child.connections.iter().flat_map(|c| [c.from, c.to]).collect();
    for id in endpoints {
        if !nodes.contains_key(&id) {
            let gene = node_from(id, rng);
            nodes.insert(id, gene);
        }
    }
    child.nodes = nodes.values().cloned().collect();

    for gene in disjoint {
        if child.path_exists(gene.to, gene.from)
            || child.connections.iter().any(|c| c.from == gene.from && c.to == gene.to)
        {
            continue;
        }
        for id in [gene.from, gene.to] {
            if !child.has_node(id) {
                let node = node_from(id, rng);
                child.nodes.push(node);
                child.nodes.sort_by_key(|n| n.id);
            }
        }
        child.connections.push(gene.clone());
        child.connections.sort_by_key(|c| c.innovation);
    }
    child.normalize();
    child
}

/// Weight/bias perturbation and structural mutation. Returns a new genome;
/// `genome` is left untouched.
pub fn mutate(
    genome: &Genome,
    config: &EvolutionConfig,
    init: &InitSpec,
    registry: &mut InnovationRegistry,
    rng: &mut Rng,
) -> Genome {
    let mut g = genome.clone();
    g.fitness = None;

    if config.connection_add_prob > 0.0 && rng.random_bool(config.connection_add_prob) {
        add_connection(&mut g, init, registry, rng);
    }
    if config.node_add_prob > 0.0 && rng.random_bool(config.node_add_prob) {
        add_node(&mut g, registry, rng);
    }

    let power = config.weight_mutate_power;
    if power > 0.0 {
        let normal = Normal::new(0.0, power).expect("power is positive");
        if config.weight_mutate_rate > 0.0 {
            for c in g.connections.iter_mut() {
                if rng.random_bool(config.weight_mutate_rate) {
                    c.weight = init.clamp(c.weight + normal.sample(rng));
                }
            }
        }
        if config.bias_mutate_rate > 0.0 {
            for n in g.nodes.iter_mut().filter(|n| n.kind != NodeKind::Input) {
                if rng.random_bool(config.bias_mutate_rate) {
                    n.bias = init.clamp(n.bias + normal.sample(rng));
                }
            }
        }
    }
    g
}

/// Adds a connection between a currently unconnected pair whose layers
/// increase along the new edge. No-op when no such pair exists.
fn add_connection(g: &mut Genome, init: &InitSpec, registry: &mut InnovationRegistry, rng: &mut Rng) {
    let Ok(layers) = assign_layers(g) else { return };
    let existing: BTreeSet<(NodeId, NodeId)> = g.connections.iter().map(|c| (c.from, c.to)).collect();
    let mut candidates = Vec::new();
    for from in g.nodes.iter().filter(|n| n.kind != NodeKind::Output) {
        for to in g.nodes.iter().filter(|n| n.kind != NodeKind::Input) {
            if from.id == to.id
                || existing.contains(&(from.id, to.id))
                || layers.layer_of[&from.id] >= layers.layer_of[&to.id]
            {
                continue;
            }
            candidates.push((from.id, to.id));
        }
    }
    // Disabled genes still count for cycles, since crossover may re-enable them.
    candidates.retain(|(from, to)| !g.path_exists(*to, *from));
    let Some(&(from, to)) = choose(&candidates, rng) else { return };
    let variation = if from < g.n_inputs as NodeId { init.input_variation } else { init.output_variation };
    g.connections.push(ConnectionGene {
        innovation: registry.connection(from, to),
        from,
        to,
        weight: init.sample(variation, rng),
        enabled: true,
    });
    g.normalize();
}

/// Splits a random enabled connection `a → b` into `a → new` (weight 1) and
/// `new → b` (old weight), disabling the original.
fn add_node(g: &mut Genome, registry: &mut InnovationRegistry, rng: &mut Rng) {
    let enabled: Vec<usize> = (0..g.connections.len()).filter(|i| g.connections[*i].enabled).collect();
    let Some(&idx) = choose(&enabled, rng) else { return };
    let old = g.connections[idx].clone();
    let node = registry.split_node(old.innovation, g);
    let existing: BTreeSet<(NodeId, NodeId)> = g.connections.iter().map(|c| (c.from, c.to)).collect();
    if existing.contains(&(old.from, node)) || existing.contains(&(node, old.to)) {
        return;
    }
    g.connections[idx].enabled = false;
    g.nodes.push(NodeGene { id: node, kind: NodeKind::Hidden, bias: 0.0, activation: Activation::LeakyRelu });
    g.connections.push(ConnectionGene {
        innovation: registry.connection(old.from, node),
        from: old.from,
        to: node,
        weight: 1.0,
        enabled: true,
    });
    g.connections.push(ConnectionGene {
        innovation: registry.connection(node, old.to),
        from: node,
        to: old.to,
        weight: old.weight,
        enabled: true,
    });
    g.normalize();
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct StagnationRecord {
    best_loss: f64,
    last_improved: u32,
}

/// One generation of genomes, partitioned into species, all evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub species: Vec<Species>,
    pub generation: u32,
    pub registry: InnovationRegistry,
    pub compatibility_threshold: f64,
    pub init: InitSpec,
    next_genome_id: u64,
    next_species_id: u64,
    stagnation: BTreeMap<u64, StagnationRecord>,
}

fn evaluate_all(genomes: &mut [Genome], batch: &Batch) -> Result<()> {
    genomes
        .par_iter_mut()
        .filter(|g| g.fitness.is_none())
        .try_for_each(|g| {
            g.fitness = Some(log_loss(g, batch)?);
            Ok(())
        })
}

impl Population {
    /// Generation 1: `population_size` minimal genomes with independent
    /// Xavier draws, evaluated on `batch` and speciated.
    pub fn initialize(
        n_inputs: usize,
        n_outputs: usize,
        batch: &Batch,
        config: &EvolutionConfig,
        rng: &mut Rng,
    ) -> Result<Population> {
        config.validate()?;
        let init = InitSpec::xavier(n_inputs, n_outputs, config.n_hidden);
        let mut genomes = Vec::with_capacity(config.population_size);
        for i in 0..config.population_size {
            let mut g = Genome::new_minimal(n_inputs, n_outputs, config.n_hidden, &init, rng)?;
            g.id = i as u64;
            genomes.push(g);
        }
        let registry = InnovationRegistry::from_genome(&genomes[0]);
        evaluate_all(&mut genomes, batch)?;
        let mut next_species_id = 0;
        let species = speciate(genomes, config.compatibility_threshold, &[], &mut next_species_id, config);
        let mut pop = Population {
            species,
            generation: 1,
            registry,
            compatibility_threshold: config.compatibility_threshold,
            init,
            next_genome_id: config.population_size as u64,
            next_species_id,
            stagnation: BTreeMap::new(),
        };
        pop.update_stagnation();
        Ok(pop)
    }

    pub fn genomes(&self) -> impl Iterator<Item = &Genome> {
        self.species.iter().flat_map(|s| s.members.iter())
    }

    pub fn size(&self) -> usize {
        self.species.iter().map(|s| s.members.len()).sum()
    }

    pub fn best(&self) -> &Genome {
        self.genomes()
            .min_by(|a, b| a.loss().total_cmp(&b.loss()).then(a.id.cmp(&b.id)))
            .expect("population is never empty")
    }

    pub fn species_of(&self, genome_id: u64) -> Option<&Species> {
        self.species.iter().find(|s| s.members.iter().any(|g| g.id == genome_id))
    }

    /// Each species' elite (its lowest-loss member), keyed by species id.
    pub fn elites(&self) -> BTreeMap<u64, Genome> {
        self.species.iter().map(|s| (s.id, s.best().clone())).collect()
    }

    pub fn threshold_reached(&self, fitness_threshold: f64) -> bool {
        self.best().loss() <= fitness_threshold
    }

    fn update_stagnation(&mut self) {
        let gen = self.generation;
        let live: BTreeSet<u64> = self.species.iter().map(|s| s.id).collect();
        self.stagnation.retain(|id, _| live.contains(id));
        for s in &self.species {
            let best = s.best().loss();
            let rec = self.stagnation.entry(s.id).or_insert(StagnationRecord { best_loss: best, last_improved: gen });
            if best < rec.best_loss {
                *rec = StagnationRecord { best_loss: best, last_improved: gen };
            }
        }
    }

    /// Checks the partition invariants: species nonempty, disjoint genome ids,
    /// every member strictly within the threshold of its representative.
    pub fn check_partition(&self, config: &EvolutionConfig, threshold: f64) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.species {
            if s.members.is_empty() {
                return Err(Error::Structure(format!("species {} is empty", s.id)));
            }
            for m in &s.members {
                if !seen.insert(m.id) {
                    return Err(Error::Structure(format!("genome {} in two species", m.id)));
                }
                if genomic_distance(&s.representative, m, config) >= threshold {
                    return Err(Error::Structure(format!(
                        "genome {} outside species {} threshold",
                        m.id, s.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Offspring counts per species, proportional to inverse mean loss
    /// (largest remainder), at least one per species for its elite.
    fn allocate(species: &[&Species], total: usize) -> Vec<usize> {
        let weights: Vec<f64> = species.iter().map(|s| 1.0 / s.mean_loss().max(LOSS_EPSILON)).collect();
        let sum: f64 = weights.iter().sum();
        let spare = total.saturating_sub(species.len());
        let shares: Vec<f64> = weights.iter().map(|w| w / sum * spare as f64).collect();
        let mut counts: Vec<usize> = shares.iter().map(|s| 1 + s.floor() as usize).collect();
        let mut assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..species.len()).collect();
        order.sort_by(|a, b| {
            let fa = shares[*a] - shares[*a].floor();
            let fb = shares[*b] - shares[*b].floor();
            fb.total_cmp(&fa).then(a.cmp(b))
        });
        for i in order.iter().cycle() {
            if assigned >= total {
                break;
            }
            counts[*i] += 1;
            assigned += 1;
        }
        counts
    }
}

/// Produces generation `t+1` from an evaluated generation `t`: stagnant
/// species are dropped, offspring are allocated per species, each species
/// keeps its elite unchanged and fills the rest by (optional) crossover of
/// tournament winners followed by mutation. The new genomes are evaluated on
/// `batch`, speciated against the previous representatives, and the
/// compatibility threshold moves one step toward the target species count.
pub fn evolve_generation(
    population: &Population,
    batch: &Batch,
    config: &EvolutionConfig,
    rng: &mut Rng,
) -> Result<Population> {
    config.validate()?;
    let mut pop = population.clone();
    let next_gen = pop.generation + 1;
    pop.registry.new_generation();

    let best_id = pop.best().id;
    let survivors: Vec<&Species> = population
        .species
        .iter()
        .filter(|s| {
            let rec = pop.stagnation.get(&s.id);
            let stagnant = rec.is_some_and(|r| pop.generation.saturating_sub(r.last_improved) >= config.stagnation_limit);
            !stagnant || s.members.iter().any(|g| g.id == best_id)
        })
        .collect();

    let counts = Population::allocate(&survivors, config.population_size);
    let mut offspring = Vec::with_capacity(config.population_size);
    for (species, count) in survivors.iter().zip(counts) {
        offspring.push(species.best().clone());
        for _ in 1..count {
            let parent = tournament_select(&species.members, config.tournament_size, rng);
            let base = if species.members.len() >= 2 && config.crossover_prob > 0.0 && rng.random_bool(config.crossover_prob) {
                let other = tournament_select(&species.members, config.tournament_size, rng);
                let (fit, weak) = if other.loss() < parent.loss() { (other, parent) } else { (parent, other) };
                crossover(fit, weak, rng)
            } else {
                let mut clone = parent.clone();
                clone.parents = vec![parent.id];
                clone
            };
            let mut child = mutate(&base, config, &pop.init, &mut pop.registry, rng);
            child.id = pop.next_genome_id;
            pop.next_genome_id += 1;
            child.generation_born = next_gen;
            child.parents = base.parents.clone();
            offspring.push(child);
        }
    }

    evaluate_all(&mut offspring, batch)?;
    let previous: Vec<(u64, Genome)> = population.species.iter().map(|s| (s.id, s.representative.clone())).collect();
    pop.species = speciate(offspring, pop.compatibility_threshold, &previous, &mut pop.next_species_id, config);
    pop.generation = next_gen;
    pop.update_stagnation();

    let n_species = pop.species.len();
    if n_species < config.target_species {
        pop.compatibility_threshold = (pop.compatibility_threshold - config.threshold_step).max(config.min_threshold);
    } else if n_species > config.target_species {
        pop.compatibility_threshold += config.threshold_step;
    }
    Ok(pop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn toy_batch() -> Batch {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 2) as f64, (i as f64) / 20.0]).collect();
        let labels = (0..20).map(|i| i % 2).collect();
        Batch::new(rows, labels, 2).unwrap()
    }

    fn genome(seed: u64) -> Genome {
        let init = InitSpec::xavier(2, 2, 3);
        Genome::new_minimal(2, 2, 3, &init, &mut seeded(seed)).unwrap()
    }

    fn with_genes(genes: &[(u64, f64)]) -> Genome {
        let mut g = genome(0);
        g.connections = genes
            .iter()
            .map(|(inn, w)| ConnectionGene { innovation: *inn, from: 0, to: 2, weight: *w, enabled: true })
            .collect();
        g
    }

    #[test]
    fn log_loss_analytic_values() {
        let mut g = genome(1);
        g.connections.iter_mut().for_each(|c| c.weight = 0.0);
        g.nodes.iter_mut().for_each(|n| n.bias = 0.0);
        let loss = log_loss(&g, &toy_batch()).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);

        // Huge logit on the right class: clipped at 1 - ε.
        let init = InitSpec::xavier(1, 2, 0);
        let mut g = Genome::new_minimal(1, 2, 0, &init, &mut seeded(3)).unwrap();
        g.connections.iter_mut().for_each(|c| c.weight = 0.0);
        g.nodes[1].bias = 500.0;
        g.nodes[2].bias = -500.0;
        let batch = Batch::new(vec![vec![0.0]; 4], vec![0; 4], 2).unwrap();
        assert!(log_loss(&g, &batch).unwrap() <= 1e-11);
    }

    #[test]
    fn distance_examples() {
        let cfg = EvolutionConfig { disjoint_coefficient: 1.0, weight_coefficient: 0.5, ..Default::default() };
        let g = genome(4);
        assert_eq!(genomic_distance(&g, &g, &cfg), 0.0);

        let a = with_genes(&[(1, 0.0), (2, 0.0)]);
        let b = with_genes(&[(3, 0.0), (4, 0.0)]);
        assert_eq!(genomic_distance(&a, &b, &cfg), 1.0);

        // Shared {1, 2} with gaps {0.5, 1.5}; a has 3 and b has 4, 5.
        // disjoint 3 of union 5 -> 0.6; weight term 0.5 * 1.0.
        let a = with_genes(&[(1, 0.0), (2, 0.0), (3, 0.1)]);
        let b = with_genes(&[(1, 0.5), (2, -1.5), (4, 0.2), (5, 0.3)]);
        let d = genomic_distance(&a, &b, &cfg);
        assert!((d - (0.6 + 0.5)).abs() < 1e-12);
        assert_eq!(d, genomic_distance(&b, &a, &cfg));
    }

    #[test]
    fn speciation_cases() {
        let cfg = EvolutionConfig::default();
        let same: Vec<Genome> = (0..5).map(|i| { let mut g = genome(7); g.id = i; g }).collect();
        let mut next = 0;
        assert_eq!(speciate(same, 0.5, &[], &mut next, &cfg).len(), 1);

        // Two clusters: identical within, fully disjoint across (distance 1).
        let mut genomes = Vec::new();
        for i in 0..3 {
            let mut g = with_genes(&[(1, 0.0), (2, 0.0)]);
            g.id = i;
            genomes.push(g);
            let mut h = with_genes(&[(10, 0.0), (11, 0.0)]);
            h.id = 10 + i;
            genomes.push(h);
        }
        let mut next = 0;
        let sp = speciate(genomes.clone(), 0.5, &[], &mut next, &cfg);
        assert_eq!(sp.len(), 2);
        assert!(sp.iter().all(|s| s.members.len() == 3));
        let mut next = 0;
        assert_eq!(speciate(genomes, f64::INFINITY, &[], &mut next, &cfg).len(), 1);
    }

    #[test]
    fn tournament_edge_cases() {
        let mut rng = seeded(1);
        let mut g = genome(1);
        g.fitness = Some(0.4);
        assert_eq!(tournament_select(std::slice::from_ref(&g), 3, &mut rng).id, g.id);
        let members: Vec<Genome> = [0.3, 0.1, 0.2]
            .iter()
            .enumerate()
            .map(|(i, f)| { let mut g = genome(i as u64); g.id = i as u64; g.fitness = Some(*f); g })
            .collect();
        for _ in 0..20 {
            assert_eq!(tournament_select(&members, 5, &mut rng).id, 1);
        }
    }

    #[test]
    fn tournament_prefers_fitter_genomes() {
        let mut rng = seeded(42);
        let members: Vec<Genome> = [0.1, 0.2, 0.3]
            .iter()
            .enumerate()
            .map(|(i, f)| { let mut g = genome(1); g.id = i as u64; g.fitness = Some(*f); g })
            .collect();
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[tournament_select(&members, 2, &mut rng).id as usize] += 1;
        }
        assert!(counts[0] > counts[2], "{counts:?}");
    }

    #[test]
    fn crossover_of_identical_parents_is_identical() {
        let g = genome(3);
        let child = crossover(&g, &g, &mut seeded(1));
        assert_eq!(child.nodes, g.nodes);
        assert_eq!(child.connections, g.connections);
    }

    #[test]
    fn crossover_unions_disjoint_innovations() {
        let init = InitSpec::xavier(2, 2, 0);
        let mut a = Genome::new_minimal(2, 2, 0, &init, &mut seeded(1)).unwrap();
        let mut b = a.clone();
        // Give the parents disjoint innovation numbers over the same edges.
        a.connections.truncate(2);
        b.connections.drain(..2);
        for c in b.connections.iter_mut() {
            c.innovation += 100;
        }
        let child = crossover(&a, &b, &mut seeded(2));
        let inns: BTreeSet<u64> = child.connections.iter().map(|c| c.innovation).collect();
        let expect: BTreeSet<u64> = a.connections.iter().chain(&b.connections).map(|c| c.innovation).collect();
        assert_eq!(inns, expect);
        child.validate().unwrap();
    }

    #[test]
    fn zero_rates_leave_genome_unchanged() {
        let cfg = EvolutionConfig {
            connection_add_prob: 0.0,
            node_add_prob: 0.0,
            weight_mutate_rate: 0.0,
            bias_mutate_rate: 0.0,
            ..Default::default()
        };
        let g = genome(5);
        let mut reg = InnovationRegistry::from_genome(&g);
        let init = InitSpec::xavier(2, 2, 3);
        let mut m = mutate(&g, &cfg, &init, &mut reg, &mut seeded(1));
        m.fitness = g.fitness;
        assert_eq!(m, g);
    }

    #[test]
    fn node_split_on_single_connection() {
        let init = InitSpec::xavier(1, 1, 0);
        let g = Genome::new_minimal(1, 1, 0, &init, &mut seeded(1)).unwrap();
        let cfg = EvolutionConfig {
            connection_add_prob: 0.0,
            node_add_prob: 1.0,
            weight_mutate_rate: 0.0,
            bias_mutate_rate: 0.0,
            ..Default::default()
        };
        let mut reg = InnovationRegistry::from_genome(&g);
        let m = mutate(&g, &cfg, &init, &mut reg, &mut seeded(2));
        assert_eq!(m.nodes.len(), g.nodes.len() + 1);
        assert_eq!(m.connections.len(), g.connections.len() + 2);
        assert!(!m.connections[0].enabled);
        let x = [0.7];
        // in -> new (w = 1) -> out preserves a positive signal exactly.
        assert_eq!(m.compile().unwrap().forward(&x).unwrap(), g.compile().unwrap().forward(&x).unwrap());
    }

    #[test]
    fn same_split_in_one_generation_shares_innovations() {
        let init = InitSpec::xavier(1, 1, 0);
        let g = Genome::new_minimal(1, 1, 0, &init, &mut seeded(1)).unwrap();
        let cfg = EvolutionConfig {
            connection_add_prob: 0.0,
            node_add_prob: 1.0,
            ..Default::default()
        };
        let mut reg = InnovationRegistry::from_genome(&g);
        let a = mutate(&g, &cfg, &init, &mut reg, &mut seeded(2));
        let b = mutate(&g, &cfg, &init, &mut reg, &mut seeded(3));
        let inns = |x: &Genome| x.connections.iter().map(|c| (c.innovation, c.from, c.to)).collect::<Vec<_>>();
        assert_eq!(inns(&a), inns(&b));
        reg.new_generation();
        let c = mutate(&g, &cfg, &init, &mut reg, &mut seeded(4));
        assert_ne!(inns(&a), inns(&c));
    }

    #[test]
    fn allocation_sums_to_population() {
        let mut sp = Vec::new();
        for (i, loss) in [0.2, 0.5, 0.9].iter().enumerate() {
            let mut g = genome(i as u64);
            g.fitness = Some(*loss);
            sp.push(Species { id: i as u64, representative: g.clone(), members: vec![g] });
        }
        let refs: Vec<&Species> = sp.iter().collect();
        let counts = Population::allocate(&refs, 16);
        assert_eq!(counts.iter().sum::<usize>(), 16);
        assert!(counts[0] > counts[2]);
        assert!(counts.iter().all(|c| *c >= 1));
    }

    #[test]
    fn zero_rates_produce_clones() {
        let cfg = EvolutionConfig {
            population_size: 6,
            n_hidden: 2,
            connection_add_prob: 0.0,
            node_add_prob: 0.0,
            weight_mutate_rate: 0.0,
            bias_mutate_rate: 0.0,
            crossover_prob: 0.0,
            ..Default::default()
        };
        let batch = toy_batch();
        let mut rng = seeded(11);
        let pop = Population::initialize(2, 2, &batch, &cfg, &mut rng).unwrap();
        let next = evolve_generation(&pop, &batch, &cfg, &mut rng).unwrap();
        assert_eq!(next.generation, 2);
        assert_eq!(next.size(), 6);
        let old: Vec<&Genome> = pop.genomes().collect();
        for g in next.genomes() {
            assert!(old.iter().any(|o| o.connections == g.connections && o.nodes == g.nodes));
        }
    }

    #[test]
    fn elitism_keeps_best_loss_non_increasing() {
        let cfg = EvolutionConfig { n_hidden: 3, ..Default::default() };
        let batch = toy_batch();
        let mut rng = seeded(5);
        let mut pop = Population::initialize(2, 2, &batch, &cfg, &mut rng).unwrap();
        for _ in 0..8 {
            let next = evolve_generation(&pop, &batch, &cfg, &mut rng).unwrap();
            assert!(next.best().loss() <= pop.best().loss());
            next.check_partition(&cfg, pop.compatibility_threshold).unwrap();
            pop = next;
        }
    }

    #[test]
    fn config_validation() {
        assert!(EvolutionConfig { node_add_prob: 1.5, ..Default::default() }.validate().is_err());
        assert!(EvolutionConfig { population_size: 1, ..Default::default() }.validate().is_err());
        assert!(EvolutionConfig::default().validate().is_ok());
    }
}
