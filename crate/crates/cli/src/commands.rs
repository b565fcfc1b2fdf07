//! The `crowdmushra` verbs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crowdmushra_core::analysis::{
    cell_means, correlate_objective, figures::emit_figure_data, merge_experiments, ranking, ranking_stability,
    summarize_all, CellTable, ConditionSummary, CorrelationReport, MergeMember, MergeSpec, ObjectiveScoreTable,
    Orientation, RankingStability, Renormalizer,
};
use crowdmushra_core::config::{sample_experiment, validate_experiment_config, ExperimentConfig, Manifest};
use crowdmushra_core::dataset::Dataset;
use crowdmushra_core::model::{ConditionId, Family, Role};
use crowdmushra_core::partition::partition_stimuli;
use crowdmushra_core::screening::{post_screen, RemovalReason, ScreeningConfig};
use crowdmushra_service::engine::partition_seed;

use crate::campaign::{run_campaign_with, CampaignOptions, CampaignOutcome};
use crate::objective::SyntheticMetric;
use crate::simulator::{ArchetypeKind, PopulationSpec};

#[derive(Debug, Parser)]
#[command(name = "crowdmushra", version, about = "Run, simulate and analyse crowdsourced MUSHRA tests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a sample experiment config, stimulus manifest and simulation population.
    Init(InitArgs),
    /// Check an experiment config against its manifest.
    Validate(ExperimentArgs),
    /// Show how the items split into rating blocks.
    Partition(PartitionArgs),
    /// Run a synthetic crowd through the session service.
    Simulate(SimulateArgs),
    /// Apply post-hoc screening to a raw score export.
    Screen(ScreenArgs),
    /// Condition summaries, cross-experiment merge and objective correlations.
    Analyze(AnalyzeArgs),
    /// Write plot-ready tables of means and subjective-vs-objective scatter.
    ExportFigures(FigureArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Directory to write into; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub items: usize,
    /// Overwrite existing files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Stimulus manifest (CSV).
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["dry_run", "out"]))]
pub struct PartitionArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Print the blocks instead of writing them.
    #[arg(long)]
    pub dry_run: bool,
    /// Write the blocks as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Population spec (TOML).
    #[arg(long)]
    pub population: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory for raw, clean, removal, objective and report files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    /// Raw score export (CSV).
    #[arg(long)]
    pub raw: PathBuf,
    /// Take screening thresholds from this experiment config instead of the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub clean_out: PathBuf,
    /// Removal audit table (CSV).
    #[arg(long)]
    pub report_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Screened score exports; rows from several experiments are merged.
    #[arg(long = "clean", required = true, num_args = 1..)]
    pub clean: Vec<PathBuf>,
    /// Experiment configs supplying condition roles and families.
    #[arg(long = "config", num_args = 1..)]
    pub config: Vec<PathBuf>,
    /// Objective score table (CSV).
    #[arg(long)]
    pub objective: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Bootstrap resamples for the ranking-stability diagnostic.
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FigureArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Metric for the scatter table; defaults to the first in the objective table.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<ExitCode> {
    match cli.command {
        Command::Init(a) => init(&a, out),
        Command::Validate(a) => validate(&a, out),
        Command::Partition(a) => partition(&a, out),
        Command::Simulate(a) => simulate(&a, out),
        Command::Screen(a) => screen(&a, out),
        Command::Analyze(a) => analyze(&a, out),
        Command::ExportFigures(a) => export_figures(&a, out),
    }
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Manifest::read_csv(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Dataset::read_csv(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_new(path: &Path, contents: &str, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn init(a: &InitArgs, out: &mut dyn Write) -> Result<ExitCode> {
    if a.items == 0 {
        bail!("--items must be at least 1");
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (config, manifest) = sample_experiment(a.items);
    let mut population = PopulationSpec::with_clickers(60, 10.0, 0.2);
    population.metrics = vec![
        SyntheticMetric::undervaluing_dnn("synthetic-quality", Orientation::HigherBetter, 3.0, 25.0),
        SyntheticMetric::undervaluing_dnn("synthetic-distortion", Orientation::LowerBetter, 3.0, 25.0),
    ];
    let mut manifest_csv = Vec::new();
    manifest.write_csv(&mut manifest_csv)?;
    write_new(&a.out.join("experiment.toml"), &config.to_toml_string()?, a.force)?;
    write_new(&a.out.join("manifest.csv"), std::str::from_utf8(&manifest_csv)?, a.force)?;
    write_new(&a.out.join("population.toml"), &population.to_toml_string()?, a.force)?;
    writeln!(
        out,
        "wrote experiment.toml, manifest.csv and population.toml to {}",
        a.out.display()
    )?;
    Ok(ExitCode::SUCCESS)
}

fn validate(a: &ExperimentArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let config = read_config(&a.config)?;
    let manifest = read_manifest(&a.manifest)?;
    let result = validate_experiment_config(&config, &manifest);
    for w in &result.warnings {
        writeln!(out, "warning: {w}")?;
    }
    for v in &result.violations {
        writeln!(out, "violation: {v}")?;
    }
    if result.is_ok() {
        writeln!(
            out,
            "ok: {} conditions, {} items, {} stimuli",
            config.conditions.len(),
            config.items.len(),
            manifest.stimuli.len()
        )?;
        Ok(ExitCode::SUCCESS)
    } else {
        writeln!(out, "{} violation(s)", result.violations.len())?;
        Ok(ExitCode::FAILURE)
    }
}

fn partition(a: &PartitionArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let config = read_config(&a.config)?;
    let blocks = partition_stimuli(&config, partition_seed(&config))?;
    if let Some(path) = &a.out {
        serde_json::to_writer_pretty(create(path)?, &blocks)?;
        writeln!(out, "wrote {} blocks to {}", blocks.len(), path.display())?;
        return Ok(ExitCode::SUCCESS);
    }
    for b in &blocks {
        let items: Vec<&str> = b.items().map(|i| i.as_str()).collect();
        writeln!(
            out,
            "{}: {} questions, {} stimuli: {}",
            b.block_id,
            b.questions.len(),
            b.stimulus_count,
            items.join(" ")
        )?;
    }
    writeln!(
        out,
        "{} blocks, {} items, target {} votes per item",
        blocks.len(),
        config.items.len(),
        config.limits.responses_target_per_item
    )?;
    Ok(ExitCode::SUCCESS)
}

fn write_campaign(o: &CampaignOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    o.raw.write_csv(create(&dir.join("raw.csv"))?)?;
    o.clean.write_csv(create(&dir.join("clean.csv"))?)?;
    o.screening.write_csv(create(&dir.join("removals.csv"))?)?;
    if !o.objective.is_empty() {
        ObjectiveScoreTable::write_csv(&o.objective, create(&dir.join("objective.csv"))?)?;
    }
    serde_json::to_writer_pretty(create(&dir.join("report.json"))?, o)?;
    Ok(())
}

fn print_summaries(out: &mut dyn Write, summaries: &[ConditionSummary]) -> Result<()> {
    writeln!(out, "{:<20} {:>8} {:>17} {:>6} {:>7}", "condition", "mean", "95% CI", "items", "scores")?;
    for s in summaries {
        let ci = s
            .ci95
            .map_or_else(|| "n/a".to_owned(), |(lo, hi)| format!("[{lo:.2}, {hi:.2}]"));
        writeln!(
            out,
            "{:<20} {:>8.2} {:>17} {:>6} {:>7}",
            s.condition_id.as_str(), s.grand_mean, ci, s.n_items, s.n_scores
        )?;
    }
    Ok(())
}

fn simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let config = read_config(&a.experiment.config)?;
    let manifest = read_manifest(&a.experiment.manifest)?;
    let text = fs::read_to_string(&a.population).with_context(|| format!("reading {}", a.population.display()))?;
    let population =
        PopulationSpec::from_toml_str(&text).with_context(|| format!("parsing {}", a.population.display()))?;
    let options = CampaignOptions {
        log_path: Some(a.out.join("events.jsonl")),
        ..CampaignOptions::default()
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if options.log_path.as_ref().is_some_and(|p| p.exists()) {
        bail!("{} already holds an event log; choose an empty --out", a.out.display());
    }
    let o = run_campaign_with(&config, &manifest, &population, a.seed, &options)?;
    write_campaign(&o, &a.out)?;

    writeln!(
        out,
        "{} listeners, {} raw scores, {} retained",
        o.listeners.len(),
        o.screening.raw_count,
        o.screening.retained_count
    )?;
    let mut kinds: Vec<ArchetypeKind> = o.listeners.iter().map(|l| l.archetype.kind).collect();
    kinds.sort();
    kinds.dedup();
    for k in kinds {
        let (excluded, total) = o.exclusion(k);
        writeln!(out, "{k}: {excluded}/{total} excluded")?;
    }
    print_summaries(out, &o.summaries)?;
    if let Some(rho) = o.ranking_spearman() {
        writeln!(out, "ranking spearman vs ground truth: {rho:.4}")?;
    }
    writeln!(out, "outputs in {}", a.out.display())?;
    Ok(ExitCode::SUCCESS)
}

fn screen(a: &ScreenArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let raw = read_dataset(&a.raw)?;
    let cfg = match &a.config {
        Some(p) => read_config(p)?.screening,
        None => ScreeningConfig::default(),
    };
    let (clean, report) = post_screen(&raw, &cfg);
    clean.write_csv(create(&a.clean_out)?)?;
    report.write_csv(create(&a.report_out)?)?;
    writeln!(
        out,
        "{} raw, {} retained; removed {} (listener-dq), {} (question-fail), {} (iqr-outlier); {} listener(s) disqualified",
        report.raw_count,
        report.retained_count,
        report.count(RemovalReason::ListenerDq),
        report.count(RemovalReason::QuestionFail),
        report.count(RemovalReason::IqrOutlier),
        report.disqualified_listeners.len()
    )?;
    Ok(ExitCode::SUCCESS)
}

/// Screened data, grouped per experiment, plus what the configs say about it.
struct Inputs {
    experiments: BTreeMap<String, CellTable>,
    order: Vec<ConditionId>,
    families: BTreeMap<ConditionId, Family>,
    reference: Option<ConditionId>,
    anchor: Option<ConditionId>,
    objective: Vec<ObjectiveScoreTable>,
}

fn load_inputs(a: &DataArgs) -> Result<Inputs> {
    let mut rows: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for p in &a.clean {
        for r in read_dataset(p)?.rows {
            rows.entry(r.experiment_id.to_string()).or_default().push(r);
        }
    }
    let experiments: BTreeMap<String, CellTable> = rows
        .into_iter()
        .map(|(id, rows)| (id, cell_means(&Dataset::new(rows))))
        .collect();

    let mut order = Vec::new();
    let mut families = BTreeMap::new();
    let (mut reference, mut anchor) = (None, None);
    for p in &a.config {
        let config = read_config(p)?;
        for c in &config.conditions {
            if !order.contains(&c.id) {
                order.push(c.id.clone());
            }
            families.insert(c.id.clone(), c.family);
            let slot = match c.role {
                Role::Reference => &mut reference,
                Role::Anchor => &mut anchor,
                Role::SystemUnderTest => continue,
            };
            match slot {
                Some(existing) if existing != &c.id => {
                    bail!("configs disagree on the {} condition: {existing} vs {}", c.role, c.id)
                }
                _ => *slot = Some(c.id.clone()),
            }
        }
    }
    for cells in experiments.values() {
        for (c, _) in cells.keys() {
            if !order.contains(c) {
                order.push(c.clone());
            }
        }
    }
    let objective = match &a.objective {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("reading {}", p.display()))?;
            ObjectiveScoreTable::read_csv(BufReader::new(f)).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Vec::new(),
    };
    Ok(Inputs {
        experiments,
        order,
        families,
        reference,
        anchor,
        objective,
    })
}

#[derive(Debug, Serialize)]
struct ExperimentAnalysis {
    experiment_id: String,
    summaries: Vec<ConditionSummary>,
    ranking: Vec<ConditionId>,
    ranking_stability: RankingStability,
}

#[derive(Debug, Serialize)]
struct MergedAnalysis {
    target_anchor: f64,
    renormalizers: Vec<(String, Renormalizer)>,
    summaries: Vec<ConditionSummary>,
    ranking: Vec<ConditionId>,
}

#[derive(Debug, Serialize)]
struct AnalysisReport {
    experiments: Vec<ExperimentAnalysis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    merged: Option<MergedAnalysis>,
    correlations: Vec<CorrelationReport>,
}

/// The cell table the whole-campaign views are computed on: the single
/// experiment, or all of them merged onto one scale.
fn combined_cells(inputs: &Inputs) -> Result<(CellTable, Option<MergedAnalysis>)> {
    if inputs.experiments.len() == 1 {
        let cells = inputs.experiments.values().next().cloned().unwrap_or_default();
        return Ok((cells, None));
    }
    let (Some(reference), Some(anchor)) = (&inputs.reference, &inputs.anchor) else {
        bail!("merging several experiments needs --config files naming the shared reference and anchor");
    };
    let merged = merge_experiments(&MergeSpec {
        members: inputs
            .experiments
            .iter()
            .map(|(id, cells)| MergeMember {
                experiment_id: id.clone(),
                cells: cells.clone(),
            })
            .collect(),
        reference: reference.clone(),
        anchor: anchor.clone(),
    })?;
    let summaries = summarize_all(&merged.cells, &inputs.order);
    Ok((
        merged.cells,
        Some(MergedAnalysis {
            target_anchor: merged.target_anchor,
            renormalizers: merged.renormalizers,
            ranking: ranking(&summaries),
            summaries,
        }),
    ))
}

fn analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let inputs = load_inputs(&a.data)?;
    if inputs.experiments.is_empty() {
        bail!("the clean exports hold no scores");
    }
    let mut experiments = Vec::new();
    for (id, cells) in &inputs.experiments {
        let summaries = summarize_all(cells, &inputs.order);
        writeln!(out, "experiment {id}")?;
        print_summaries(out, &summaries)?;
        let stability = ranking_stability(cells, a.resamples, a.seed);
        writeln!(
            out,
            "ranking stability: {}/{} resamples unchanged ({})",
            stability.unchanged,
            stability.resamples,
            if stability.stable { "stable" } else { "not stable" }
        )?;
        experiments.push(ExperimentAnalysis {
            experiment_id: id.clone(),
            ranking: ranking(&summaries),
            summaries,
            ranking_stability: stability,
        });
    }
    let (cells, merged) = combined_cells(&inputs)?;
    if let Some(m) = &merged {
        writeln!(out, "merged onto anchor level {:.2}", m.target_anchor)?;
        print_summaries(out, &m.summaries)?;
    }
    let correlations: Vec<CorrelationReport> = inputs
        .objective
        .iter()
        .map(|t| correlate_objective(&cells, t, &inputs.families))
        .collect();
    if !correlations.is_empty() {
        let all = CorrelationReport {
            rows: correlations.iter().flat_map(|r| r.rows.iter().cloned()).collect(),
        };
        let mut buf = Vec::new();
        all.write_csv(&mut buf)?;
        out.write_all(&buf)?;
    }
    if let Some(path) = &a.out {
        let report = AnalysisReport {
            experiments,
            merged,
            correlations,
        };
        serde_json::to_writer_pretty(create(path)?, &report)?;
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn export_figures(a: &FigureArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let inputs = load_inputs(&a.data)?;
    if inputs.experiments.is_empty() {
        bail!("the clean exports hold no scores");
    }
    let (cells, _) = combined_cells(&inputs)?;
    let table = match &a.metric {
        Some(m) => Some(
            inputs
                .objective
                .iter()
                .find(|t| &t.metric == m)
                .with_context(|| format!("metric {m} is not in the objective table"))?,
        ),
        None => inputs.objective.first(),
    };
    let data = emit_figure_data(&cells, &inputs.order, &inputs.families, table);
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    data.write_means_csv(create(&a.out_dir.join("means.csv"))?)?;
    data.write_scatter_csv(create(&a.out_dir.join("scatter.csv"))?)?;
    writeln!(
        out,
        "wrote means.csv ({} conditions) and scatter.csv ({} points) to {}{}",
        data.means.len(),
        data.scatter.len(),
        a.out_dir.display(),
        if data.reverse_objective_axis {
            "; objective axis is lower-better"
        } else {
            ""
        }
    )?;
    Ok(ExitCode::SUCCESS)
}
