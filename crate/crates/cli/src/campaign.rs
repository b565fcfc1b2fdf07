//! End-to-end simulated campaigns against the real session service.
//!
//! Listeners only ever see what the service sends a browser. To "hear" a
//! slot they ask the service which audio file it would stream for that slot
//! and look the file up in their own copy of the manifest, which is what a
//! human does with their ears.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aho_corasick::AhoCorasick;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crowdmushra_core::analysis::{
    cell_means, correlate_objective, merge_experiments, ranking, spearman, summarize_all, CellTable,
    ConditionSummary, CorrelationReport, MergeMember, MergeSpec, MergedTable, ObjectiveScoreTable,
};
use crowdmushra_core::config::{ExperimentConfig, Manifest};
use crowdmushra_core::dataset::Dataset;
use crowdmushra_core::model::{
    derive_seed, ConditionId, Family, ItemId, ListenerId, MushraQuestion, PresentedStimulus, QuestionId,
    SlotLabel,
};
use crowdmushra_core::qualification::{
    Demographics, HearingSelfReport, LastListeningTest, ListeningDevice, QuestionnaireResponse,
};
use crowdmushra_core::screening::ScreeningReport;
use crowdmushra_service::export::{clean_dataset, raw_dataset};
use crowdmushra_service::{
    AdminAction, ClientRating, Engine, EventRecord, ManualClock, Service, SessionId, SessionView, Step,
    StepPayload,
};

use crate::objective::synthetic_objective;
use crate::simulator::{
    rate_training, simulate_rating, ArchetypeKind, GroundTruth, PopulationSpec, RaterArchetype, SimulationError,
};

/// Simulated start time, and the think time between two requests.
const START: u64 = 1_750_000_000;
const STEP_SECONDS: u64 = 45;
/// Requests after which a listener that has not finished is considered stuck.
const MAX_STEPS: usize = 256;

#[derive(Debug, Clone, Default)]
pub struct CampaignOptions {
    /// Persist the event log here instead of keeping it in memory.
    pub log_path: Option<PathBuf>,
    /// Capture the service state whenever the log reaches one of these lengths.
    pub snapshot_at: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ListenerOutcome {
    pub worker: String,
    pub archetype: RaterArchetype,
    pub final_state: String,
    pub blocks_submitted: usize,
    pub blocks_accepted: usize,
    /// Turned away by the session flow (gating, hearing, training or block screening).
    pub rejected_live: bool,
    /// Disqualified by offline screening.
    pub disqualified_offline: bool,
    pub clean_scores: usize,
}

impl ListenerOutcome {
    /// Rejected during the session or disqualified offline.
    pub fn screened_out(&self) -> bool {
        self.rejected_live || self.disqualified_offline
    }

    /// None of this listener's ratings can reach the analysis: screened out,
    /// or finished without ever being handed a block.
    pub fn excluded(&self) -> bool {
        self.screened_out() || self.blocks_submitted == 0
    }
}

/// Result of scanning client payloads for hidden identities.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BlindnessScan {
    pub payloads: usize,
    pub pre_completion_payloads: usize,
    pub violations: Vec<String>,
}

/// Flags any payload that names a condition, its label or its audio path.
#[derive(Debug, Clone)]
pub struct BlindnessScanner {
    forbidden: Vec<String>,
    matcher: AhoCorasick,
    pub result: BlindnessScan,
}

impl BlindnessScanner {
    pub fn new(config: &ExperimentConfig, manifest: &Manifest) -> Self {
        let mut forbidden: BTreeSet<String> = BTreeSet::new();
        for c in &config.conditions {
            forbidden.insert(c.id.to_string());
            forbidden.insert(c.label.clone());
        }
        for s in &manifest.stimuli {
            forbidden.insert(s.audio_uri.clone());
        }
        let forbidden: Vec<String> = forbidden.into_iter().filter(|s| !s.is_empty()).collect();
        Self {
            matcher: AhoCorasick::new(&forbidden).expect("plain string patterns"),
            forbidden,
            result: BlindnessScan::default(),
        }
    }

    pub fn scan(&mut self, view: &SessionView) {
        let body = serde_json::to_string(view).expect("views serialize");
        self.result.payloads += 1;
        if !matches!(view.step, Step::Completed { .. }) {
            self.result.pre_completion_payloads += 1;
        }
        for m in self.matcher.find_overlapping_iter(&body) {
            let f = &self.forbidden[m.pattern().as_usize()];
            self.result
                .violations
                .push(format!("{} leaked {f:?} in {}", view.session_id, view.state));
        }
    }
}

/// Everything a simulated campaign produced. The JSON form leaves out the
/// tables that are exported as CSV.
#[derive(Debug, Clone, Serialize)]
pub struct CampaignOutcome {
    pub experiment_id: String,
    pub seed: u64,
    pub truth: GroundTruth,
    pub families: BTreeMap<ConditionId, Family>,
    #[serde(skip)]
    pub raw: Dataset,
    #[serde(skip)]
    pub clean: Dataset,
    pub screening: ScreeningReport,
    #[serde(skip)]
    pub cells: CellTable,
    pub summaries: Vec<ConditionSummary>,
    pub ranking: Vec<ConditionId>,
    #[serde(skip)]
    pub objective: Vec<ObjectiveScoreTable>,
    pub correlations: Vec<CorrelationReport>,
    pub listeners: Vec<ListenerOutcome>,
    pub blindness: BlindnessScan,
    #[serde(skip)]
    pub events: Vec<EventRecord>,
    #[serde(skip)]
    pub snapshots: BTreeMap<usize, Engine>,
}

impl CampaignOutcome {
    pub fn grand_mean(&self, condition: &ConditionId) -> Option<f64> {
        self.summaries
            .iter()
            .find(|s| &s.condition_id == condition)
            .map(|s| s.grand_mean)
    }

    /// Spearman correlation between recovered grand means and latent qualities.
    pub fn ranking_spearman(&self) -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .summaries
            .iter()
            .filter_map(|s| Some((s.grand_mean, *self.truth.true_quality.get(&s.condition_id)?)))
            .unzip();
        spearman(&x, &y).ok()
    }

    /// Largest |recovered grand mean - latent quality| over conditions.
    pub fn max_mean_error(&self) -> f64 {
        self.summaries
            .iter()
            .filter_map(|s| Some((s.grand_mean - self.truth.true_quality.get(&s.condition_id)?).abs()))
            .fold(0.0, f64::max)
    }

    /// (excluded, total) listeners of one archetype kind.
    pub fn exclusion(&self, kind: ArchetypeKind) -> (usize, usize) {
        let of_kind: Vec<_> = self.listeners.iter().filter(|l| l.archetype.kind == kind).collect();
        (of_kind.iter().filter(|l| l.excluded()).count(), of_kind.len())
    }
}

fn questionnaire() -> StepPayload {
    StepPayload::Questionnaire(QuestionnaireResponse {
        listening_device: Some(ListeningDevice::WiredHeadphones),
        tiredness: Some(2),
        last_listening_test: Some(LastListeningTest::Never),
        hearing_self_report: Some(HearingSelfReport::Normal),
        demographics: Demographics {
            gender: Some("undisclosed".into()),
            age_bracket: Some("25-34".into()),
            english_level: Some("native".into()),
        },
    })
}

struct Listener<'a> {
    worker: String,
    archetype: RaterArchetype,
    rng: ChaCha8Rng,
    truth: &'a GroundTruth,
}

struct Driver<'a> {
    service: &'a Service,
    clock: &'a ManualClock,
    config: &'a ExperimentConfig,
    heard: HashMap<PathBuf, (ItemId, ConditionId)>,
    digits: HashMap<PathBuf, String>,
    scanner: BlindnessScanner,
    snapshot_at: &'a BTreeSet<usize>,
    snapshots: BTreeMap<usize, Engine>,
}

impl Driver<'_> {
    fn observe(&mut self) {
        let n = self.service.event_count();
        if self.snapshot_at.contains(&n) && !self.snapshots.contains_key(&n) {
            self.snapshots.insert(n, self.service.snapshot());
        }
    }

    fn submit(&mut self, sid: &SessionId, payload: StepPayload) -> Result<SessionView, SimulationError> {
        self.clock.advance(STEP_SECONDS);
        let view = self.service.submit(sid, None, payload)?;
        self.observe();
        Ok(view)
    }

    /// Reconstructs what a listener hears on one screen.
    fn perceive(
        &self,
        sid: &SessionId,
        question_id: &QuestionId,
        reference_uri: &str,
        slots: &[crowdmushra_service::engine::SlotView],
    ) -> Result<MushraQuestion, SimulationError> {
        let mut presented = Vec::with_capacity(slots.len());
        let mut item = None;
        for s in slots {
            let path = self.service.stimulus_file(sid, &s.slot)?;
            let (i, c) = self.heard.get(&path).cloned().ok_or_else(|| {
                crowdmushra_service::ServiceError::NotFound(format!("unrecognised audio {}", path.display()))
            })?;
            let role = self.config.condition(&c).map(|c| c.role).ok_or_else(|| {
                crowdmushra_service::ServiceError::NotFound(format!("unknown condition {c}"))
            })?;
            item = Some(i);
            presented.push(PresentedStimulus {
                slot: s.slot.clone(),
                condition_id: c,
                role,
            });
        }
        let unknown = |what: &str| crowdmushra_service::ServiceError::NotFound(what.to_owned());
        let reference = self.config.reference().ok_or_else(|| unknown("reference condition"))?;
        Ok(MushraQuestion {
            question_id: question_id.clone(),
            item_id: item.ok_or_else(|| unknown("question without slots"))?,
            presented,
            open_reference: reference.id.clone(),
            open_reference_slot: SlotLabel::new(reference_uri.rsplit('/').next().unwrap_or_default()),
        })
    }

    fn run(&mut self, l: &mut Listener<'_>) -> Result<(), SimulationError> {
        self.clock.advance(STEP_SECONDS);
        let mut view = self.service.create_session(&self.config.experiment_id, &l.worker)?;
        self.observe();
        let sid = view.session_id.clone();
        let listener = ListenerId::new(l.worker.clone());
        for _ in 0..MAX_STEPS {
            self.scanner.scan(&view);
            let payload = match &view.step {
                Step::Completed { .. } | Step::Rejected { .. } => return Ok(()),
                Step::Questionnaire { .. } => questionnaire(),
                Step::HearingTest { trials, .. } => {
                    let mut answers = Vec::with_capacity(trials.len());
                    for t in trials {
                        let path = self.service.hearing_file(&sid, t.index)?;
                        answers.push(self.digits.get(&path).cloned().unwrap_or_default());
                    }
                    StepPayload::HearingTest { answers }
                }
                Step::Training { question, .. } => {
                    let q = self.perceive(&sid, &question.question_id, &question.reference_uri, &question.slots)?;
                    let r = if l.archetype.follows_instructions() {
                        rate_training(&l.archetype, l.truth, &q, &listener)
                    } else {
                        simulate_rating(&l.archetype, l.truth, &q, &listener, &mut l.rng)
                    };
                    StepPayload::Training { rating: client(r) }
                }
                Step::Rating { questions, .. } => {
                    let mut ratings = Vec::with_capacity(questions.len());
                    for question in questions {
                        let q =
                            self.perceive(&sid, &question.question_id, &question.reference_uri, &question.slots)?;
                        ratings.push(client(simulate_rating(&l.archetype, l.truth, &q, &listener, &mut l.rng)));
                    }
                    StepPayload::Rating {
                        ratings,
                        continue_rating: true,
                    }
                }
            };
            view = self.submit(&sid, payload)?;
        }
        Err(SimulationError::Stalled {
            listener: l.worker.clone(),
            state: view.state,
        })
    }
}

fn client(r: crowdmushra_core::model::RatingSet) -> ClientRating {
    ClientRating {
        question_id: r.question_id,
        scores: r.scores,
        elapsed_ms: r.elapsed_ms,
    }
}

fn objective_csv(tables: &[ObjectiveScoreTable]) -> String {
    let mut out = Vec::new();
    ObjectiveScoreTable::write_csv(tables, &mut out).expect("in-memory write");
    String::from_utf8(out).expect("utf-8 csv")
}

/// Runs one simulated campaign with default options.
pub fn run_campaign(
    config: &ExperimentConfig,
    manifest: &Manifest,
    population: &PopulationSpec,
    seed: u64,
) -> Result<CampaignOutcome, SimulationError> {
    run_campaign_with(config, manifest, population, seed, &CampaignOptions::default())
}

/// Creates the experiment on a fresh service, sends every simulated listener
/// through the full session flow in a seeded arrival order, then screens and
/// analyses the exported data.
pub fn run_campaign_with(
    config: &ExperimentConfig,
    manifest: &Manifest,
    population: &PopulationSpec,
    seed: u64,
    options: &CampaignOptions,
) -> Result<CampaignOutcome, SimulationError> {
    if population.size() == 0 {
        return Err(SimulationError::EmptyCampaign);
    }
    for g in &population.groups {
        g.archetype.validate()?;
    }
    let mut truth = population
        .ground_truth
        .clone()
        .unwrap_or_else(|| GroundTruth::evenly_spaced(config));
    truth.validate(config)?;
    if population.item_spread_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["item-spread"]));
        truth = truth.with_item_spread(config, population.item_spread_sd, &mut rng);
    }

    let audio_root = Path::new("audio-root");
    let clock = Arc::new(ManualClock::new(START));
    let service = match &options.log_path {
        Some(p) => Service::open(p, clock.clone(), audio_root)?,
        None => Service::in_memory(clock.clone(), audio_root),
    };
    service.create_experiment(config.clone(), manifest.clone())?;
    let objective = synthetic_objective(config, &truth, &population.metrics, seed);
    if !objective.is_empty() {
        service.admin(
            &config.experiment_id,
            AdminAction::LoadObjective {
                table: objective_csv(&objective),
            },
        )?;
    }

    let mut arrivals: Vec<RaterArchetype> = population
        .groups
        .iter()
        .flat_map(|g| std::iter::repeat_n(g.archetype, g.count))
        .collect();
    arrivals.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &["arrivals"])));

    let mut driver = Driver {
        service: &service,
        clock: &clock,
        config,
        heard: manifest
            .stimuli
            .iter()
            .map(|s| (audio_root.join(&s.audio_uri), (s.item_id.clone(), s.condition_id.clone())))
            .collect(),
        digits: config
            .hearing_test
            .sets
            .iter()
            .map(|t| (audio_root.join(&t.audio_uri), t.answer_key.to_string()))
            .collect(),
        scanner: BlindnessScanner::new(config, manifest),
        snapshot_at: &options.snapshot_at,
        snapshots: BTreeMap::new(),
    };
    driver.observe();
    let mut workers = Vec::with_capacity(arrivals.len());
    for (i, archetype) in arrivals.into_iter().enumerate() {
        let worker = format!("sim-{:04}", i + 1);
        let mut l = Listener {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &["listener", &worker])),
            worker: worker.clone(),
            archetype,
            truth: &truth,
        };
        driver.run(&mut l)?;
        workers.push((worker, archetype));
    }
    let blindness = driver.scanner.result.clone();
    let snapshots = std::mem::take(&mut driver.snapshots);

    let engine = service.snapshot();
    let raw = raw_dataset(&engine, &config.experiment_id)?;
    let (clean, screening) = clean_dataset(&engine, &config.experiment_id)?;
    let cells = cell_means(&clean);
    let summaries = summarize_all(&cells, config.conditions.iter().map(|c| &c.id));
    let families: BTreeMap<ConditionId, Family> =
        config.conditions.iter().map(|c| (c.id.clone(), c.family)).collect();
    let correlations = objective
        .iter()
        .map(|t| correlate_objective(&cells, t, &families))
        .collect();

    let listeners = workers
        .into_iter()
        .map(|(worker, archetype)| {
            let s = engine.sessions.values().find(|s| s.listener_id.as_str() == worker);
            let listener_id = ListenerId::new(worker.clone());
            ListenerOutcome {
                final_state: s.map(|s| s.state.to_string()).unwrap_or_default(),
                blocks_submitted: s.map_or(0, |s| s.finished_blocks.len()),
                blocks_accepted: s.map_or(0, |s| s.finished_blocks.iter().filter(|b| b.accepted).count()),
                rejected_live: s.is_some_and(|s| {
                    matches!(s.state, crowdmushra_service::engine::SessionState::Rejected { .. })
                }),
                disqualified_offline: screening.disqualified_listeners.contains(&listener_id),
                clean_scores: clean.rows.iter().filter(|r| r.listener_id == listener_id).count(),
                worker,
                archetype,
            }
        })
        .collect();

    Ok(CampaignOutcome {
        experiment_id: config.experiment_id.to_string(),
        seed,
        ranking: ranking(&summaries),
        truth,
        families,
        raw,
        clean,
        screening,
        cells,
        summaries,
        objective,
        correlations,
        listeners,
        blindness,
        events: service.events(),
        snapshots,
    })
}

/// Puts several campaigns that share a reference and anchor on one scale.
pub fn merge_campaigns(
    outcomes: &[CampaignOutcome],
    reference: &ConditionId,
    anchor: &ConditionId,
) -> Result<MergedTable, SimulationError> {
    let spec = MergeSpec {
        members: outcomes
            .iter()
            .map(|o| MergeMember {
                experiment_id: o.experiment_id.clone(),
                cells: o.cells.clone(),
            })
            .collect(),
        reference: reference.clone(),
        anchor: anchor.clone(),
    };
    Ok(merge_experiments(&spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crowdmushra_core::config::sample_experiment;

    #[test]
    fn empty_population_is_an_error() {
        let (config, manifest) = sample_experiment(8);
        let err = run_campaign(&config, &manifest, &PopulationSpec::new(vec![]), 1).unwrap_err();
        assert_eq!(err, SimulationError::EmptyCampaign);
    }

    #[test]
    fn noiseless_diligent_campaign_recovers_latents_exactly() {
        let (config, manifest) = sample_experiment(8);
        let pop = PopulationSpec::with_clickers(12, 0.0, 0.0);
        let out = run_campaign(&config, &manifest, &pop, 3).unwrap();
        assert_eq!(out.max_mean_error(), 0.0);
        assert_eq!(out.ranking, out.truth.ranking());
        assert!(out.listeners.iter().all(|l| !l.excluded()));
        assert!(out.blindness.violations.is_empty());
    }

    #[test]
    fn same_seed_same_outcome() {
        let (config, manifest) = sample_experiment(8);
        let pop = PopulationSpec::with_clickers(10, 10.0, 0.2);
        let a = run_campaign(&config, &manifest, &pop, 42).unwrap();
        let b = run_campaign(&config, &manifest, &pop, 42).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.events, b.events);
        let c = run_campaign(&config, &manifest, &pop, 43).unwrap();
        assert_ne!(a.raw, c.raw);
    }

    #[test]
    fn scanner_flags_leaks() {
        let (config, manifest) = sample_experiment(2);
        let mut scanner = BlindnessScanner::new(&config, &manifest);
        scanner.scan(&SessionView {
            session_id: SessionId("s".into()),
            state: "rejected(timeout)".into(),
            step: Step::Rejected {
                reason: "cond-evs".into(),
            },
        });
        assert_eq!(scanner.result.violations.len(), 1);
    }
}
