//! Command-line front end: `synth`, `train`, `attack` and `report`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::criteria::{trace_from_csv, trace_to_csv, StopReason, TraceRow};
use crate::data::{load_traceset, save_traceset, synth_balanced, synth_traces, SynthSpec, TraceFormat, TraceSet};
use crate::ensemble::{train_stacked, StackedModel};
use crate::error::{Error, Result};
use crate::evaluation::{average_rank, curve_from_csv, curve_to_csv, curve_to_svg, tge_metrics, tge_to_csv, RankCurve};
use crate::rng::derive_rng;

#[derive(Debug, Parser)]
#[command(name = "infoneat", version, about = "Neuroevolution with information-theoretic stopping for profiled side-channel attacks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic profiling and attack trace sets.
    Synth(CommonArgs),
    /// Train the stacked one-vs-all model.
    Train(CommonArgs),
    /// Attack a trace set and write rank curves.
    Attack(CommonArgs),
    /// Merge training and attack outputs into one report.
    Report(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for training (0 uses all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Input trace set: the profiling set for `train`, the attack set for `attack`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

pub enum Role {
    Profiling,
    Attack,
}

impl CommonArgs {
    /// Loads the configuration file (or defaults) and applies the flags.
    pub fn resolve(&self, role: Role) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &self.out {
            cfg.paths.out = Some(o.clone());
        }
        if let Some(w) = self.workers {
            cfg.train.workers = w;
        }
        if let Some(d) = &self.dataset {
            match role {
                Role::Profiling => cfg.paths.dataset = Some(d.clone()),
                Role::Attack => cfg.paths.attack_dataset = Some(d.clone()),
            }
        }
        if let Some(m) = &self.model {
            cfg.paths.model = Some(m.clone());
        }
        Ok(cfg)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn load_set(path: &Path) -> Result<TraceSet> {
    if !path.exists() {
        return Err(Error::input(format!("dataset {} does not exist", path.display())));
    }
    load_traceset(path, TraceFormat::from_path(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutputs {
    pub train: PathBuf,
    pub attack: PathBuf,
}

/// Writes `train.trc` (balanced, `n_per_class` per class) and `attack.trc`
/// (`attack_traces` uniform plaintexts, optionally jittered).
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutputs> {
    let seed = cfg.require_seed()?;
    let spec = &cfg.synth.spec;
    let train = synth_balanced(spec, seed, &mut derive_rng(seed, "synth-train", 0))?;
    let attack_spec = SynthSpec { desync_window: cfg.synth.attack_desync_window, ..spec.clone() };
    let attack = synth_traces(&attack_spec, cfg.synth.attack_traces, seed, &mut derive_rng(seed, "synth-attack", 0))?;
    let out = SynthOutputs { train: cfg.dataset_path(), attack: cfg.attack_path() };
    for (set, path) in [(&train, &out.train), (&attack, &out.attack)] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            ensure_dir(dir)?;
        }
        save_traceset(set, path, TraceFormat::from_path(path))?;
        load_set(path)?;
    }
    Ok(out)
}

fn trace_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("training_traces")
}

fn trace_file(cfg: &RunConfig, class: u8) -> PathBuf {
    trace_dir(cfg).join(format!("class_{class:03}.csv"))
}

/// Trains the stacked model and writes it with one training-trace CSV per
/// sub-model.
pub fn cmd_train(cfg: &RunConfig) -> Result<StackedModel> {
    let seed = cfg.require_seed()?;
    let set = load_set(&cfg.dataset_path())?;
    let trained = train_stacked(&set, &cfg.train, seed)?;
    let model = trained.model;
    let json = model.to_json()?;
    StackedModel::from_json(&json)?;
    ensure_dir(&trace_dir(cfg))?;
    for s in &model.sub_models {
        write(&trace_file(cfg, s.class_id), trace_to_csv(&s.trace))?;
    }
    write(&cfg.model_path(), json)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutputs {
    pub curve: RankCurve,
    pub tge: BTreeMap<u32, Option<usize>>,
}

fn curve_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("rank_curve.csv")
}

fn tge_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("tge.csv")
}

/// Ranks the key over random subsets of the attack set and writes the curve
/// (CSV and SVG) and the guessing-entropy table.
pub fn cmd_attack(cfg: &RunConfig) -> Result<AttackOutputs> {
    let seed = cfg.require_seed()?;
    let model = StackedModel::load(&cfg.model_path())?;
    let set = load_set(&cfg.attack_path())?;
    let key = match (cfg.attack.key, set.key.for_trace(0)) {
        (Some(k), _) | (None, Some(k)) => k,
        (None, None) => return Err(Error::Config("attack set has no key; set attack.key".into())),
    };
    let leakage = cfg.leakage()?;
    if leakage.n_classes() != model.m {
        return Err(Error::Config(format!(
            "leakage model has {} classes, model has {}",
            leakage.n_classes(),
            model.m
        )));
    }
    let predictions = model.compile()?.predict_set(&set)?;
    let counts = cfg.attack.counts(set.n);
    let curve = average_rank(&predictions, &set.plaintexts, key, &leakage, &counts, cfg.attack.repetitions, seed)?;
    let tge = tge_metrics(&curve, &cfg.attack.thresholds);
    let svg = curve_to_svg(&curve);
    write(&curve_path(cfg), curve_to_csv(&curve))?;
    write(&cfg.out_dir().join("rank_curve.svg"), svg)?;
    write(&tge_path(cfg), tge_to_csv(&tge))?;
    Ok(AttackOutputs { curve, tge })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubModelSummary {
    pub class_id: u8,
    pub generations: u32,
    pub stop_reason: StopReason,
    pub final_loss: f64,
    pub nodes: usize,
    pub hidden_nodes: usize,
    pub enabled_connections: usize,
    pub trainable_parameters: usize,
    pub species: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub nodes: usize,
    pub hidden_nodes: usize,
    pub enabled_connections: usize,
    pub trainable_parameters: usize,
    pub species: usize,
    pub mean_generations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub final_trace_count: usize,
    pub final_mean_rank: f64,
    pub final_median_rank: f64,
    pub tge: Vec<(String, Option<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_fingerprint: String,
    pub classes: usize,
    pub features: usize,
    pub sub_models: Vec<SubModelSummary>,
    pub totals: Totals,
    pub training_traces: BTreeMap<u8, Vec<TraceRow>>,
    pub attack: Option<AttackSummary>,
}

fn read_tge(path: &Path) -> Result<Vec<(String, Option<usize>)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (name, cell) = l.split_once(',').ok_or_else(|| Error::input(format!("bad T_GE row {l:?}")))?;
            let value = match cell {
                "F" => None,
                v => Some(v.parse().map_err(|_| Error::input(format!("bad T_GE value {v:?}")))?),
            };
            Ok((name.to_string(), value))
        })
        .collect()
}

/// Builds the consolidated report and writes `report.json` and `report.md`.
pub fn cmd_report(cfg: &RunConfig) -> Result<Report> {
    let model = StackedModel::load(&cfg.model_path())?;
    let mut sub_models = Vec::new();
    let mut training_traces = BTreeMap::new();
    for s in &model.sub_models {
        let g = &s.genome.genome;
        sub_models.push(SubModelSummary {
            class_id: s.class_id,
            generations: s.generations,
            stop_reason: s.stop_reason,
            final_loss: g.loss(),
            nodes: g.nodes.len(),
            hidden_nodes: g.hidden_count(),
            enabled_connections: g.enabled_connection_count(),
            trainable_parameters: g.trainable_parameters(),
            species: s.species,
        });
        let path = trace_file(cfg, s.class_id);
        let rows = if path.exists() { trace_from_csv(&std::fs::read_to_string(&path)?)? } else { s.trace.clone() };
        training_traces.insert(s.class_id, rows);
    }
    let totals = Totals {
        nodes: sub_models.iter().map(|s| s.nodes).sum(),
        hidden_nodes: sub_models.iter().map(|s| s.hidden_nodes).sum(),
        enabled_connections: sub_models.iter().map(|s| s.enabled_connections).sum(),
        trainable_parameters: sub_models.iter().map(|s| s.trainable_parameters).sum::<usize>()
            + model.m * (model.m + 1),
        species: sub_models.iter().map(|s| s.species).sum(),
        mean_generations: sub_models.iter().map(|s| f64::from(s.generations)).sum::<f64>()
            / sub_models.len().max(1) as f64,
    };
    let attack = if curve_path(cfg).exists() && tge_path(cfg).exists() {
        let curve = curve_from_csv(&std::fs::read_to_string(curve_path(cfg))?, cfg.attack.repetitions)?;
        let last = curve.trace_counts.len().checked_sub(1).ok_or_else(|| Error::input("empty rank curve"))?;
        Some(AttackSummary {
            final_trace_count: curve.trace_counts[last],
            final_mean_rank: curve.mean_rank[last],
            final_median_rank: curve.median_rank[last],
            tge: read_tge(&tge_path(cfg))?,
        })
    } else {
        None
    };
    let report = Report {
        config_fingerprint: model.config_fingerprint.clone(),
        classes: model.m,
        features: model.n_features,
        sub_models,
        totals,
        training_traces,
        attack,
    };
    write(&cfg.out_dir().join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write(&cfg.out_dir().join("report.md"), render_markdown(&report))?;
    Ok(report)
}

pub fn render_markdown(r: &Report) -> String {
    let mut md = String::from("# Run report\n\n");
    let _ = writeln!(md, "- classes: {}\n- features: {}\n- config fingerprint: `{}`\n", r.classes, r.features, r.config_fingerprint);
    md.push_str("## Sub-models\n\n");
    md.push_str("| class | generations | stop reason | final loss | nodes | hidden | connections | parameters | species |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for s in &r.sub_models {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} | {} | {} | {} | {} | {} |",
            s.class_id,
            s.generations,
            s.stop_reason,
            s.final_loss,
            s.nodes,
            s.hidden_nodes,
            s.enabled_connections,
            s.trainable_parameters,
            s.species
        );
    }
    let t = &r.totals;
    let _ = writeln!(
        md,
        "| total | {:.2} (mean) | | | {} | {} | {} | {} | {} |\n",
        t.mean_generations, t.nodes, t.hidden_nodes, t.enabled_connections, t.trainable_parameters, t.species
    );
    md.push_str("Total trainable parameters include the meta-learner's weights and intercepts.\n\n");
    md.push_str("## Training traces\n\n");
    for (class, rows) in &r.training_traces {
        let _ = writeln!(md, "### Class {class}\n\n| generation | best loss | last-layer CMI |\n|---|---|---|");
        for row in rows {
            let cmi = row.last_layer_cmi.map(|c| format!("{c:.6}")).unwrap_or_default();
            let _ = writeln!(md, "| {} | {:.6} | {} |", row.generation, row.best_loss, cmi);
        }
        md.push('\n');
    }
    md.push_str("## Attack\n\n");
    match &r.attack {
        None => md.push_str("No attack results yet.\n"),
        Some(a) => {
            let _ = writeln!(
                md,
                "Mean rank {:.3} (median {:.1}) with {} traces.\n\n| metric | traces |\n|---|---|",
                a.final_mean_rank, a.final_median_rank, a.final_trace_count
            );
            for (name, v) in &a.tge {
                let cell = v.map(|n| n.to_string()).unwrap_or_else(|| "F".into());
                let _ = writeln!(md, "| {name} | {cell} |");
            }
        }
    }
    md
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let out = cmd_synth(&a.resolve(Role::Profiling)?)?;
            println!("wrote {} and {}", out.train.display(), out.attack.display());
        }
        Command::Train(a) => {
            let cfg = a.resolve(Role::Profiling)?;
            let model = cmd_train(&cfg)?;
            let gens: Vec<u32> = model.sub_models.iter().map(|s| s.generations).collect();
            println!("trained {} sub-models (generations {:?}); wrote {}", model.m, gens, cfg.model_path().display());
        }
        Command::Attack(a) => {
            let out = cmd_attack(&a.resolve(Role::Attack)?)?;
            for (t, n) in &out.tge {
                println!("T_GE{t}: {}", n.map(|v| v.to_string()).unwrap_or_else(|| "F".into()));
            }
        }
        Command::Report(a) => {
            let cfg = a.resolve(Role::Attack)?;
            cmd_report(&cfg)?;
            println!("wrote {}", cfg.out_dir().join("report.md").display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let args = CommonArgs { seed: Some(4), workers: Some(2), dataset: Some("a.trc".into()), ..Default::default() };
        let cfg = args.resolve(Role::Attack).unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.train.workers, 2);
        assert_eq!(cfg.attack_path(), PathBuf::from("a.trc"));
        assert_eq!(cfg.dataset_path(), PathBuf::from("out/train.trc"));
    }

    #[test]
    fn parses_subcommands() {
        let cli = Cli::try_parse_from(["infoneat", "train", "--seed", "3", "--out", "x"]).unwrap();
        assert!(matches!(cli.command, Command::Train(ref a) if a.seed == Some(3)));
        assert!(Cli::try_parse_from(["infoneat", "fly"]).is_err());
    }

    #[test]
    fn missing_seed_or_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.out = Some(dir.path().to_path_buf());
        assert!(matches!(cmd_synth(&cfg), Err(Error::Config(_))));
        cfg.seed = Some(1);
        assert!(matches!(cmd_train(&cfg), Err(Error::Input(_))));
    }
}
