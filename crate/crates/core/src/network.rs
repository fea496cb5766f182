//! Genome encoding of irregular feed-forward networks and their evaluation.
//!
//! Node ids are laid out as inputs `0..f`, outputs `f..f+m`, hidden nodes
//! from `f+m` upward. Connections may skip layers but never point into an
//! input node or out of an output node, and the graph of *all* connection
//! genes (enabled or not) is kept acyclic so crossover can re-enable any gene
//! without creating a cycle.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type NodeId = u32;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Hidden,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu,
    SoftmaxMember,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGene {
    pub id: NodeId,
    pub kind: NodeKind,
    pub bias: f64,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionGene {
    pub innovation: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub weight: f64,
    pub enabled: bool,
}

/// Network genome. `nodes` are kept sorted by id and `connections` by
/// innovation number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub id: u64,
    pub n_inputs: usize,
    pub n_outputs: usize,
    pub nodes: Vec<NodeGene>,
    pub connections: Vec<ConnectionGene>,
    /// Log loss on the evaluation batch; lower is better.
    pub fitness: Option<f64>,
    pub generation_born: u32,
    #[serde(default)]
    pub parents: Vec<u64>,
}

/// Xavier-style initialization: zero-mean normal draws with per-layer
/// standard deviation `sqrt(2 / (fan_in + fan_out))`, clamped to three
/// standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub mean: f64,
    /// Deviation for connections leaving the input layer.
    pub input_variation: f64,
    /// Deviation for connections entering the output layer from hidden nodes.
    pub output_variation: f64,
}

impl InitSpec {
    pub fn xavier(n_inputs: usize, n_outputs: usize, n_hidden: usize) -> Self {
        let v = |a: usize, b: usize| (2.0 / (a + b) as f64).sqrt();
        if n_hidden == 0 {
            let var = v(n_inputs, n_outputs);
            InitSpec { mean: 0.0, input_variation: var, output_variation: var }
        } else {
            InitSpec {
                mean: 0.0,
                input_variation: v(n_inputs, n_hidden),
                output_variation: v(n_hidden, n_outputs),
            }
        }
    }

    pub fn max_variation(&self) -> f64 {
        self.input_variation.max(self.output_variation)
    }

    /// Symmetric clamp applied to every weight and bias during evolution.
    pub fn limit(&self) -> f64 {
        3.0 * self.max_variation()
    }

    pub fn clamp(&self, v: f64) -> f64 {
        let lim = self.limit();
        v.clamp(self.mean - lim, self.mean + lim)
    }

    pub fn sample(&self, variation: f64, rng: &mut Rng) -> f64 {
        let normal = Normal::new(self.mean, variation).expect("variation is positive");
        let lim = 3.0 * variation;
        normal.sample(rng).clamp(self.mean - lim, self.mean + lim)
    }
}

impl Genome {
    /// One hidden layer of `n_hidden` nodes, densely connected to the inputs
    /// and outputs; with `n_hidden == 0` the inputs connect straight to the
    /// outputs. Innovation numbers of the initial connections depend only on
    /// the shape, so every genome of a run starts with matching genes.
    pub fn new_minimal(
        n_inputs: usize,
        n_outputs: usize,
        n_hidden: usize,
        init: &InitSpec,
        rng: &mut Rng,
    ) -> Result<Genome> {
        if n_inputs == 0 || n_outputs == 0 {
            return Err(Error::input("genomes need at least one input and one output"));
        }
        let mut nodes = Vec::with_capacity(n_inputs + n_outputs + n_hidden);
        for i in 0..n_inputs {
            nodes.push(NodeGene {
                id: i as NodeId,
                kind: NodeKind::Input,
                bias: 0.0,
                activation: Activation::Identity,
            });
        }
        for o in 0..n_outputs {
            nodes.push(NodeGene {
                id: (n_inputs + o) as NodeId,
                kind: NodeKind::Output,
                bias: init.sample(init.output_variation, rng),
                activation: Activation::SoftmaxMember,
            });
        }
        let first_hidden = n_inputs + n_outputs;
        for h in 0..n_hidden {
            nodes.push(NodeGene {
                id: (first_hidden + h) as NodeId,
                kind: NodeKind::Hidden,
                bias: init.sample(init.input_variation, rng),
                activation: Activation::LeakyRelu,
            });
        }

        let mut connections = Vec::new();
        let mut innovation = 0u64;
        let mut push = |from: usize, to: usize, variation: f64, rng: &mut Rng| {
            connections.push(ConnectionGene {
                innovation,
                from: from as NodeId,
                to: to as NodeId,
                weight: init.sample(variation, rng),
                enabled: true,
            });
            innovation += 1;
        };
        if n_hidden == 0 {
            for i in 0..n_inputs {
                for o in 0..n_outputs {
                    push(i, n_inputs + o, init.input_variation, rng);
                }
            }
        } else {
            for i in 0..n_inputs {
                for h in 0..n_hidden {
                    push(i, first_hidden + h, init.input_variation, rng);
                }
            }
            for h in 0..n_hidden {
                for o in 0..n_outputs {
                    push(first_hidden + h, n_inputs + o, init.output_variation, rng);
                }
            }
        }

        Ok(Genome {
            id: 0,
            n_inputs,
            n_outputs,
            nodes,
            connections,
            fitness: None,
            generation_born: 1,
            parents: Vec::new(),
        })
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeGene> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn has_node(&self, id: NodeId) -> bool {
        self.node(id).is_some()
    }

    pub fn output_ids(&self) -> impl Iterator<Item = NodeId> {
        (self.n_inputs..self.n_inputs + self.n_outputs).map(|i| i as NodeId)
    }

    pub fn hidden_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Hidden).count()
    }

    pub fn enabled_connection_count(&self) -> usize {
        self.connections.iter().filter(|c| c.enabled).count()
    }

    /// Trainable parameters: enabled weights plus hidden and output biases.
    pub fn trainable_parameters(&self) -> usize {
        self.enabled_connection_count()
            + self.nodes.iter().filter(|n| n.kind != NodeKind::Input).count()
    }

    pub fn loss(&self) -> f64 {
        self.fitness.unwrap_or(f64::INFINITY)
    }

    /// Restores the sort invariants after in-place edits.
    pub(crate) fn normalize(&mut self) {
        self.nodes.sort_by_key(|n| n.id);
        self.connections.sort_by_key(|c| c.innovation);
    }

    /// Checks endpoint references, interface shape, duplicate genes and
    /// acyclicity of the full connection graph.
    pub fn validate(&self) -> Result<()> {
        let inputs = self.nodes.iter().filter(|n| n.kind == NodeKind::Input).count();
        let outputs = self.nodes.iter().filter(|n| n.kind == NodeKind::Output).count();
        if inputs != self.n_inputs || outputs != self.n_outputs {
            return Err(Error::Structure(format!(
                "expected {}/{} input/output nodes, found {inputs}/{outputs}",
                self.n_inputs, self.n_outputs
            )));
        }
        for w in self.nodes.windows(2) {
            if w[0].id >= w[1].id {
                return Err(Error::Structure("node ids not unique and sorted".into()));
            }
        }
        let mut seen_pairs = BTreeSet::new();
        for w in self.connections.windows(2) {
            if w[0].innovation >= w[1].innovation {
                return Err(Error::Structure("innovation numbers not unique and sorted".into()));
            }
        }
        for c in &self.connections {
            let (Some(from), Some(to)) = (self.node(c.from), self.node(c.to)) else {
                return Err(Error::Structure(format!(
                    "connection {} references a missing node",
                    c.innovation
                )));
            };
            if c.from == c.to {
                return Err(Error::Structure(format!("connection {} is a self loop", c.innovation)));
            }
            if to.kind == NodeKind::Input || from.kind == NodeKind::Output {
                return Err(Error::Structure(format!(
                    "connection {} enters an input or leaves an output",
                    c.innovation
                )));
            }
            if !c.weight.is_finite() {
                return Err(Error::Structure(format!("connection {} has non-finite weight", c.innovation)));
            }
            if !seen_pairs.insert((c.from, c.to)) {
                return Err(Error::Structure(format!(
                    "duplicate connection {} -> {}",
                    c.from, c.to
                )));
            }
        }
        if topological_order(self, false).is_none() {
            return Err(Error::Structure("connection graph has a cycle".into()));
        }
        Ok(())
    }

    /// True when the enabled connections form a DAG.
    pub fn is_acyclic(&self) -> bool {
        topological_order(self, true).is_some()
    }

    /// Whether a path `from ⇝ to` exists over all connection genes.
    pub fn path_exists(&self, from: NodeId, to: NodeId) -> bool {
        if from == to {
            return true;
        }
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for c in &self.connections {
            adj.entry(c.from).or_default().push(c.to);
        }
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if seen.insert(n) {
                if let Some(next) = adj.get(&n) {
                    stack.extend(next.iter().copied());
                }
            }
        }
        false
    }

    pub fn compile(&self) -> Result<Network> {
        Network::compile(self)
    }

    pub fn to_record(&self) -> GenomeRecord {
        GenomeRecord {
            format: GENOME_FORMAT.to_string(),
            version: GENOME_VERSION,
            genome: self.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.to_record())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Genome> {
        let record: GenomeRecord = serde_json::from_slice(&fs::read(path)?)?;
        record.into_genome()
    }
}

pub const GENOME_FORMAT: &str = "infoneat.genome";
pub const GENOME_VERSION: u32 = 1;

/// Versioned, self-describing JSON wrapper for a genome. Floats are written
/// in shortest round-trip form, so save/load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenomeRecord {
    pub format: String,
    pub version: u32,
    pub genome: Genome,
}

impl GenomeRecord {
    pub fn into_genome(self) -> Result<Genome> {
        if self.format != GENOME_FORMAT {
            return Err(Error::input(format!("not a genome record: {:?}", self.format)));
        }
        if self.version != GENOME_VERSION {
            return Err(Error::input(format!("unsupported genome version {}", self.version)));
        }
        self.genome.validate()?;
        Ok(self.genome)
    }
}

/// Kahn's algorithm over enabled (or all) connections, ties broken by node id.
fn topological_order(genome: &Genome, enabled_only: bool) -> Option<Vec<NodeId>> {
    let mut indegree: BTreeMap<NodeId, usize> = genome.nodes.iter().map(|n| (n.id, 0)).collect();
    let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for c in genome.connections.iter().filter(|c| c.enabled || !enabled_only) {
        *indegree.get_mut(&c.to)? += 1;
        adj.entry(c.from).or_default().push(c.to);
    }
    let mut ready: BTreeSet<NodeId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(n) = ready.pop_first() {
        order.push(n);
        if let Some(next) = adj.get(&n) {
            for m in next {
                let d = indegree.get_mut(m)?;
                *d -= 1;
                if *d == 0 {
                    ready.insert(*m);
                }
            }
        }
    }
    (order.len() == indegree.len()).then_some(order)
}

/// Layer index per node: the longest enabled path from any input. Hidden
/// nodes without enabled inputs sit at layer 1. Output nodes share one final
/// layer `depth + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAssignment {
    pub layer_of: BTreeMap<NodeId, usize>,
    /// Highest hidden-layer index (0 when there are no hidden nodes).
    pub depth: usize,
}

impl LayerAssignment {
    pub fn output_layer(&self) -> usize {
        self.depth + 1
    }

    /// Hidden node ids of layer `j` (1-based), ascending.
    pub fn hidden_layer(&self, genome: &Genome, j: usize) -> Vec<NodeId> {
        genome
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Hidden && self.layer_of.get(&n.id) == Some(&j))
            .map(|n| n.id)
            .collect()
    }
}

pub fn assign_layers(genome: &Genome) -> Result<LayerAssignment> {
    let order = topological_order(genome, true)
        .ok_or_else(|| Error::Structure("enabled connections contain a cycle".into()))?;
    let mut incoming: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for c in genome.connections.iter().filter(|c| c.enabled) {
        incoming.entry(c.to).or_default().push(c.from);
    }
    let mut layer_of = BTreeMap::new();
    for id in &order {
        let node = genome.node(*id).expect("order comes from node list");
        let layer = match node.kind {
            NodeKind::Input => 0,
            _ => {
                1 + incoming
                    .get(id)
                    .map(|preds| preds.iter().map(|p| layer_of[p]).max().unwrap_or(0))
                    .unwrap_or(0)
            }
        };
        layer_of.insert(*id, layer);
    }
    let depth = genome
        .nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Hidden)
        .map(|n| layer_of[&n.id])
        .max()
        .unwrap_or(0);
    for id in genome.output_ids() {
        layer_of.insert(id, depth + 1);
    }
    Ok(LayerAssignment { layer_of, depth })
}

fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Softmax with the maximum logit subtracted first.
pub fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone)]
struct PlanStep {
    slot: usize,
    bias: f64,
    hidden: bool,
    inputs: Vec<(usize, f64)>,
}

/// A genome compiled to a topologically ordered evaluation plan.
#[derive(Debug, Clone)]
pub struct Network {
    n_inputs: usize,
    n_outputs: usize,
    node_ids: Vec<NodeId>,
    steps: Vec<PlanStep>,
    output_slots: Vec<usize>,
    layers: LayerAssignment,
}

impl Network {
    pub fn compile(genome: &Genome) -> Result<Network> {
        let layers = assign_layers(genome)?;
        let order = topological_order(genome, true).expect("checked by assign_layers");
        let slot_of: BTreeMap<NodeId, usize> = genome.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut incoming: BTreeMap<NodeId, Vec<(usize, f64)>> = BTreeMap::new();
        for c in genome.connections.iter().filter(|c| c.enabled) {
            incoming.entry(c.to).or_default().push((slot_of[&c.from], c.weight));
        }
        let steps = order
            .iter()
            .filter_map(|id| {
                let node = genome.node(*id)?;
                (node.kind != NodeKind::Input).then(|| PlanStep {
                    slot: slot_of[id],
                    bias: node.bias,
                    hidden: node.kind == NodeKind::Hidden,
                    inputs: incoming.remove(id).unwrap_or_default(),
                })
            })
            .collect();
        Ok(Network {
            n_inputs: genome.n_inputs,
            n_outputs: genome.n_outputs,
            node_ids: genome.nodes.iter().map(|n| n.id).collect(),
            steps,
            output_slots: genome.output_ids().map(|id| slot_of[&id]).collect(),
            layers,
        })
    }

    pub fn layers(&self) -> &LayerAssignment {
        &self.layers
    }

    /// Evaluates every node; returns node values indexed like `node_ids`
    /// (output slots hold logits) and the output probabilities.
    fn evaluate(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if input.len() != self.n_inputs {
            return Err(Error::size(format!(
                "expected {} features, got {}",
                self.n_inputs,
                input.len()
            )));
        }
        if input.iter().any(|v| v.is_nan()) {
            return Err(Error::input("NaN in network input"));
        }
        let mut values = vec![0.0; self.node_ids.len()];
        // Inputs occupy the first slots because node ids are sorted.
        values[..self.n_inputs].copy_from_slice(input);
        for step in &self.steps {
            let z = step.inputs.iter().fold(step.bias, |acc, (slot, w)| acc + w * values[*slot]);
            values[step.slot] = if step.hidden { leaky_relu(z) } else { z };
        }
        let logits: Vec<f64> = self.output_slots.iter().map(|s| values[*s]).collect();
        Ok((values, stable_softmax(&logits)))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(input)?.1)
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    /// Batched evaluation that also records every hidden node's activation,
    /// grouped by layer.
    pub fn forward_collect<R: AsRef<[f64]>>(&self, batch: &[R]) -> Result<LayerActivations> {
        let depth = self.layers.depth;
        let mut group_slots: Vec<Vec<usize>> = vec![Vec::new(); depth];
        let mut group_ids: Vec<Vec<NodeId>> = vec![Vec::new(); depth];
        for (slot, id) in self.node_ids.iter().enumerate() {
            let layer = self.layers.layer_of[id];
            if slot >= self.n_inputs && !self.output_slots.contains(&slot) {
                group_slots[layer - 1].push(slot);
                group_ids[layer - 1].push(*id);
            }
        }
        let mut columns: Vec<Vec<Vec<f64>>> = group_slots
            .iter()
            .map(|g| vec![Vec::with_capacity(batch.len()); g.len()])
            .collect();
        let mut probabilities = Vec::with_capacity(batch.len());
        for row in batch {
            let (values, probs) = self.evaluate(row.as_ref())?;
            for (g, slots) in group_slots.iter().enumerate() {
                for (u, slot) in slots.iter().enumerate() {
                    columns[g][u].push(values[*slot]);
                }
            }
            probabilities.push(probs);
        }

        let mut groups: Vec<ActivationGroup> = columns
            .into_iter()
            .zip(group_ids)
            .enumerate()
            .filter(|(_, (cols, _))| !cols.is_empty())
            .map(|(g, (columns, node_ids))| ActivationGroup { layer: g + 1, node_ids, columns })
            .collect();
        let output_columns = (0..self.n_outputs)
            .map(|k| probabilities.iter().map(|p: &Vec<f64>| p[k]).collect())
            .collect();
        groups.push(ActivationGroup {
            layer: depth + 1,
            node_ids: self.output_slots.iter().map(|s| self.node_ids[*s]).collect(),
            columns: output_columns,
        });
        Ok(LayerActivations { groups, probabilities })
    }
}

/// Activations of one layer over a batch: `columns[u][i]` is unit `u` on row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationGroup {
    pub layer: usize,
    pub node_ids: Vec<NodeId>,
    pub columns: Vec<Vec<f64>>,
}

/// Hidden layers in increasing order, then the output probabilities as the
/// final group.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub groups: Vec<ActivationGroup>,
    pub probabilities: Vec<Vec<f64>>,
}

impl LayerActivations {
    pub fn hidden_groups(&self) -> &[ActivationGroup] {
        &self.groups[..self.groups.len() - 1]
    }

    pub fn output_group(&self) -> &ActivationGroup {
        self.groups.last().expect("output group always present")
    }
}

pub fn forward(genome: &Genome, input: &[f64]) -> Result<Vec<f64>> {
    genome.compile()?.forward(input)
}

pub fn forward_collect<R: AsRef<[f64]>>(genome: &Genome, batch: &[R]) -> Result<LayerActivations> {
    genome.compile()?.forward_collect(batch)
}

/// Picks a uniformly random element; `None` on an empty slice.
pub(crate) fn choose<'a, T>(items: &'a [T], rng: &mut Rng) -> Option<&'a T> {
    (!items.is_empty()).then(|| &items[rng.random_range(0..items.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn hand_genome() -> Genome {
        // input 0 -> hidden 2 (w = 1.0) -> output 1 (w = -2.0); all biases zero.
        Genome {
            id: 0,
            n_inputs: 1,
            n_outputs: 1,
            nodes: vec![
                NodeGene { id: 0, kind: NodeKind::Input, bias: 0.0, activation: Activation::Identity },
                NodeGene { id: 1, kind: NodeKind::Output, bias: 0.0, activation: Activation::SoftmaxMember },
                NodeGene { id: 2, kind: NodeKind::Hidden, bias: 0.0, activation: Activation::LeakyRelu },
            ],
            connections: vec![
                ConnectionGene { innovation: 0, from: 0, to: 2, weight: 1.0, enabled: true },
                ConnectionGene { innovation: 1, from: 2, to: 1, weight: -2.0, enabled: true },
            ],
            fitness: None,
            generation_born: 1,
            parents: vec![],
        }
    }

    fn two_class_hand_genome() -> Genome {
        // As above but with a second output fed by the input directly (w = 0.5).
        let mut g = hand_genome();
        g.n_outputs = 2;
        g.nodes = vec![
            NodeGene { id: 0, kind: NodeKind::Input, bias: 0.0, activation: Activation::Identity },
            NodeGene { id: 1, kind: NodeKind::Output, bias: 0.0, activation: Activation::SoftmaxMember },
            NodeGene { id: 2, kind: NodeKind::Output, bias: 0.0, activation: Activation::SoftmaxMember },
            NodeGene { id: 3, kind: NodeKind::Hidden, bias: 0.0, activation: Activation::LeakyRelu },
        ];
        g.connections = vec![
            ConnectionGene { innovation: 0, from: 0, to: 3, weight: 1.0, enabled: true },
            ConnectionGene { innovation: 1, from: 3, to: 1, weight: -2.0, enabled: true },
            ConnectionGene { innovation: 2, from: 0, to: 2, weight: 0.5, enabled: true },
        ];
        g
    }

    #[test]
    fn minimal_genome_shape() {
        let init = InitSpec::xavier(2, 2, 0);
        let g = Genome::new_minimal(2, 2, 0, &init, &mut seeded(1)).unwrap();
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.connections.len(), 4);
        g.validate().unwrap();

        let init = InitSpec::xavier(5, 2, 10);
        let g = Genome::new_minimal(5, 2, 10, &init, &mut seeded(1)).unwrap();
        assert_eq!(g.hidden_count(), 10);
        assert_eq!(g.connections.len(), 5 * 10 + 10 * 2);
        for c in &g.connections {
            let var = if c.from < 5 { init.input_variation } else { init.output_variation };
            assert!(c.weight.abs() <= 3.0 * var);
        }
    }

    #[test]
    fn minimal_genome_is_deterministic() {
        let init = InitSpec::xavier(3, 2, 4);
        let a = Genome::new_minimal(3, 2, 4, &init, &mut seeded(9)).unwrap();
        let b = Genome::new_minimal(3, 2, 4, &init, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let init = InitSpec::xavier(3, 2, 4);
        let mut g = Genome::new_minimal(3, 2, 4, &init, &mut seeded(2)).unwrap();
        g.connections.iter_mut().for_each(|c| c.weight = 0.0);
        g.nodes.iter_mut().for_each(|n| n.bias = 0.0);
        assert_eq!(forward(&g, &[0.3, 0.1, 0.9]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn stable_softmax_handles_huge_logits() {
        assert_eq!(stable_softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let p = stable_softmax(&[1e300, 0.0]);
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn hand_computed_forward() {
        // hidden = leaky(-1) = -0.01; logit_1 = -2 * -0.01 = 0.02; logit_2 = 0.5 * -1 = -0.5
        let p = forward(&two_class_hand_genome(), &[-1.0]).unwrap();
        let e1 = 0.02f64.exp();
        let e2 = (-0.5f64).exp();
        assert!((p[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((p[1] - e2 / (e1 + e2)).abs() < 1e-15);
        // A single output always gets probability 1.
        assert_eq!(forward(&hand_genome(), &[-1.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn nan_input_rejected() {
        assert!(matches!(forward(&hand_genome(), &[f64::NAN]), Err(Error::Input(_))));
        assert!(matches!(forward(&hand_genome(), &[0.0, 1.0]), Err(Error::Size(_))));
    }

    #[test]
    fn layers_of_minimal_and_skip_genomes() {
        let init = InitSpec::xavier(2, 2, 0);
        let g = Genome::new_minimal(2, 2, 0, &init, &mut seeded(1)).unwrap();
        let la = assign_layers(&g).unwrap();
        assert_eq!(la.depth, 0);
        assert!(g.output_ids().all(|o| la.layer_of[&o] == 1));

        // inputs 0,1; output 2; hidden 3 (layer 1), hidden 4 (layer 2);
        // input 0 skips straight to hidden 4.
        let mut g = two_class_hand_genome();
        g.n_inputs = 2;
        g.n_outputs = 1;
        g.nodes = vec![
            NodeGene { id: 0, kind: NodeKind::Input, bias: 0.0, activation: Activation::Identity },
            NodeGene { id: 1, kind: NodeKind::Input, bias: 0.0, activation: Activation::Identity },
            NodeGene { id: 2, kind: NodeKind::Output, bias: 0.0, activation: Activation::SoftmaxMember },
            NodeGene { id: 3, kind: NodeKind::Hidden, bias: 0.0, activation: Activation::LeakyRelu },
            NodeGene { id: 4, kind: NodeKind::Hidden, bias: 0.0, activation: Activation::LeakyRelu },
        ];
        g.connections = vec![
            ConnectionGene { innovation: 0, from: 1, to: 3, weight: 1.0, enabled: true },
            ConnectionGene { innovation: 1, from: 3, to: 4, weight: 1.0, enabled: true },
            ConnectionGene { innovation: 2, from: 0, to: 4, weight: 1.0, enabled: true },
            ConnectionGene { innovation: 3, from: 4, to: 2, weight: 1.0, enabled: true },
        ];
        g.validate().unwrap();
        let la = assign_layers(&g).unwrap();
        assert_eq!(la.layer_of[&0], 0);
        assert_eq!(la.layer_of[&4], 2);
        assert_eq!(la.depth, 2);
        assert_eq!(la.layer_of[&2], 3);
    }

    #[test]
    fn cycle_is_a_structure_error() {
        let mut g = hand_genome();
        g.nodes.push(NodeGene { id: 3, kind: NodeKind::Hidden, bias: 0.0, activation: Activation::LeakyRelu });
        g.connections.push(ConnectionGene { innovation: 2, from: 2, to: 3, weight: 1.0, enabled: true });
        g.connections.push(ConnectionGene { innovation: 3, from: 3, to: 2, weight: 1.0, enabled: true });
        assert!(matches!(assign_layers(&g), Err(Error::Structure(_))));
        assert!(g.validate().is_err());
    }

    #[test]
    fn forward_collect_groups() {
        let init = InitSpec::xavier(3, 2, 4);
        let g = Genome::new_minimal(3, 2, 4, &init, &mut seeded(5)).unwrap();
        let batch = vec![vec![0.2, 0.4, 0.6]; 5];
        let acts = forward_collect(&g, &batch).unwrap();
        assert_eq!(acts.groups.len(), 2);
        assert_eq!(acts.hidden_groups()[0].columns.len(), 4);
        for col in acts.groups.iter().flat_map(|g| &g.columns) {
            assert!(col.iter().all(|v| *v == col[0]));
        }
    }

    #[test]
    fn record_version_is_checked() {
        let mut rec = hand_genome().to_record();
        rec.version = 99;
        assert!(rec.into_genome().is_err());
    }
}
