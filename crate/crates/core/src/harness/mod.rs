//! Experiment commands behind the CLI: training runs, directed evaluation,
//! changed-set studies, the random baseline, report merging, and replay.
//!
//! Every command writes its outputs atomically into one directory together
//! with a `manifest.json` that is enough to re-run it bit for bit.

mod heat;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::app_model::{generate_synthetic_app, load_app_model, ActionSpec, AppModel, FunctionId, GeneratorSpec};
use crate::coordinator::{
    guided_explore, train_in_process, DirectedEvent, DirectedReport, DirectedRunConfig, Policy, QEvaluator,
    SessionStats, SessionStep, TrainObserver, TrainingRunConfig,
};
use crate::encoder::{EncoderConfig, Featurizer, HashFeaturizer};
use crate::error::{Error, Result};
use crate::learner::{NullSink, StepStats, Trainer, TrainerConfig, TrainerSummary};
use crate::qnet::{load_checkpoint, save_checkpoint, Checkpoint, MlpParams};

pub use heat::{heat_buckets, heat_study, mean_heat, pool_heat_tables, FunctionOutcome, HeatBucket, HeatStudyConfig, HeatTable};
pub use report::{
    events_to_cover_all, merge_reports, render_csv, render_markdown, Cell, ColumnSummary, CommitReport, CommitRow,
    CommitSummary, MergedReport, MergedRow, RunReport,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORTS_FILE: &str = "reports.json";

const TARGET_SALT: u64 = 0x7461_7267_6574_73;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Greedy on a trained checkpoint.
    Hawkeye,
    Random,
    /// Greedy on freshly initialized weights.
    Untrained,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Hawkeye => "hawkeye",
            PolicyKind::Random => "random",
            PolicyKind::Untrained => "untrained",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSelection {
    RandomK {
        k: usize,
    },
    ChangedSet {
        name: String,
    },
    /// Event-handler callbacks (`on*` methods other than lifecycle ones).
    ListenerLike {
        #[serde(default)]
        k: Option<usize>,
    },
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub app: Option<PathBuf>,
    pub generator: Option<GeneratorSpec>,
    pub policy: PolicyKind,
    pub seeds: Vec<u64>,
    /// Events per directed run.
    pub budget: usize,
    pub max_directed_steps: usize,
    pub epsilon: f64,
    pub loop_escape: Option<usize>,
    pub targets: TargetSelection,
    /// Sets walked by `commit-eval`; all sets of the app when absent.
    pub changed_sets: Option<Vec<String>>,
    pub commit_policies: Vec<PolicyKind>,
    /// Run the heat study during `evaluate`.
    pub heat_study: Option<HeatStudyConfig>,
    pub encoder: EncoderConfig,
    pub trainer: TrainerConfig,
    pub training: TrainingRunConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            app: None,
            generator: None,
            policy: PolicyKind::Hawkeye,
            seeds: vec![0],
            budget: 1_000,
            max_directed_steps: 200,
            epsilon: 0.0,
            loop_escape: None,
            targets: TargetSelection::RandomK { k: 50 },
            changed_sets: None,
            commit_policies: vec![PolicyKind::Hawkeye, PolicyKind::Random, PolicyKind::Untrained],
            heat_study: None,
            encoder: EncoderConfig::default(),
            trainer: TrainerConfig::default(),
            training: TrainingRunConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.app.is_some() == self.generator.is_some() {
            return Err(Error::Validation("spec needs exactly one of `app` and `generator`".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Validation("seeds must be non-empty".into()));
        }
        if self.commit_policies.is_empty() {
            return Err(Error::Validation("commit_policies must be non-empty".into()));
        }
        match &self.targets {
            TargetSelection::RandomK { k: 0 } | TargetSelection::ListenerLike { k: Some(0) } => {
                return Err(Error::Validation("target count must be positive".into()));
            }
            _ => {}
        }
        self.directed_config().validate()?;
        self.encoder.validate()?;
        self.trainer.validate()?;
        self.training.validate()?;
        if let Some(h) = &self.heat_study {
            h.validate()?;
        }
        Ok(())
    }

    /// Pins every seed of the spec to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self.trainer.seed = seed;
        self.training.seed = seed;
        self
    }

    pub fn directed_config(&self) -> DirectedRunConfig {
        DirectedRunConfig {
            max_directed_steps: self.max_directed_steps,
            event_budget: self.budget,
            epsilon: self.epsilon,
            loop_escape: self.loop_escape,
        }
    }

    pub fn load_app(&self) -> Result<AppModel> {
        match (&self.app, &self.generator) {
            (Some(path), None) => load_app_model(path),
            (None, Some(g)) => generate_synthetic_app(g),
            _ => Err(Error::Validation("spec needs exactly one of `app` and `generator`".into())),
        }
    }

    /// Makes a relative app path absolute so the manifest replays from anywhere.
    fn resolved(mut self) -> Result<Self> {
        if let Some(p) = &self.app {
            self.app = Some(fs::canonicalize(p).map_err(|e| Error::Validation(format!("app {}: {e}", p.display())))?);
        }
        Ok(self)
    }
}

const LIFECYCLE: &[&str] = &["onCreate", "onStart", "onResume", "onPause", "onStop", "onDestroy", "onRestart"];

/// True for signatures whose method looks like a GUI event callback.
pub fn is_listener_like(signature: &str) -> bool {
    let method = signature.rsplit('.').next().unwrap_or(signature);
    let mut chars = method.chars();
    method.starts_with("on")
        && chars.nth(2).is_some_and(|c| c.is_ascii_uppercase())
        && !LIFECYCLE.contains(&method)
}

/// Targets for one seed. Sampling depends only on the app, the selection,
/// and the seed, so every policy sees the same list.
pub fn select_targets(model: &AppModel, sel: &TargetSelection, seed: u64) -> Result<Vec<FunctionId>> {
    let table = &model.function_table;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TARGET_SALT);
    let sample = |pool: Vec<FunctionId>, k: usize, rng: &mut ChaCha8Rng| -> Result<Vec<FunctionId>> {
        if k > pool.len() {
            return Err(Error::Validation(format!("cannot sample {k} targets from {}", pool.len())));
        }
        Ok(pool.choose_multiple(rng, k).copied().collect())
    };
    match sel {
        TargetSelection::RandomK { k } => sample(table.ids().collect(), *k, &mut rng),
        TargetSelection::ChangedSet { name } => Ok(table.changed_set(name)?.to_vec()),
        TargetSelection::ListenerLike { k } => {
            let pool: Vec<FunctionId> = table.entries.iter().filter(|(_, s)| is_listener_like(s)).map(|(id, _)| *id).collect();
            match k {
                Some(k) => sample(pool, *k, &mut rng),
                None => Ok(pool),
            }
        }
        TargetSelection::All => Ok(table.ids().collect()),
    }
}

/// Network and encoding behind a greedy policy.
#[derive(Clone)]
pub struct PolicyNet {
    pub params: MlpParams,
    pub featurizer: Arc<dyn Featurizer>,
}

impl PolicyNet {
    pub fn from_checkpoint(ckpt: &Checkpoint, model: &AppModel) -> Result<Self> {
        check_checkpoint(ckpt, model)?;
        Ok(PolicyNet {
            params: ckpt.pred.clone(),
            featurizer: Arc::new(HashFeaturizer::new(ckpt.encoder, model.function_table.clone())?),
        })
    }

    pub fn untrained(spec: &ExperimentSpec, model: &AppModel) -> Result<Self> {
        let sizes = spec.trainer.layer_sizes(spec.encoder.input_dim());
        Ok(PolicyNet {
            params: MlpParams::init(&sizes, spec.trainer.seed)?,
            featurizer: Arc::new(HashFeaturizer::new(spec.encoder, model.function_table.clone())?),
        })
    }
}

pub fn check_checkpoint(ckpt: &Checkpoint, model: &AppModel) -> Result<()> {
    let fp = model.fingerprint();
    if ckpt.meta.app_fingerprint != fp {
        return Err(Error::Validation(format!(
            "checkpoint was trained on app {}, not {fp}",
            ckpt.meta.app_fingerprint
        )));
    }
    if ckpt.pred.input_dim() != ckpt.encoder.input_dim() {
        return Err(Error::Validation(format!(
            "checkpoint network takes {} inputs but its encoder produces {}",
            ckpt.pred.input_dim(),
            ckpt.encoder.input_dim()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Train,
    Evaluate,
    CommitEval,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl ArtifactRef {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(ArtifactRef {
            path: fs::canonicalize(path)?,
            sha256: sha256_hex(&fs::read(path)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: CommandKind,
    pub tool_version: String,
    pub app_fingerprint: String,
    pub spec: ExperimentSpec,
    pub checkpoint: Option<ArtifactRef>,
    /// Output file name to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temp file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("{} is not a file path", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn json_pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

/// Writes `files`, then a manifest listing their digests.
fn finish(
    out: &Path,
    command: CommandKind,
    spec: &ExperimentSpec,
    fingerprint: String,
    checkpoint: Option<ArtifactRef>,
    files: Vec<(&str, Vec<u8>)>,
) -> Result<Manifest> {
    fs::create_dir_all(out)?;
    let mut outputs = BTreeMap::new();
    for (name, bytes) in files {
        write_atomic(&out.join(name), &bytes)?;
        outputs.insert(name.to_string(), sha256_hex(&bytes));
    }
    let manifest = Manifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        app_fingerprint: fingerprint,
        spec: spec.clone(),
        checkpoint,
        outputs,
    };
    write_atomic(&out.join(MANIFEST_FILE), &json_pretty(&manifest))?;
    Ok(manifest)
}

#[derive(Serialize)]
struct TrainEventLine<'a> {
    i: u64,
    session: usize,
    screen: &'a str,
    action: &'a ActionSpec,
    covered: &'a BTreeSet<FunctionId>,
    exited: bool,
    goal: FunctionId,
    goal_triggered: bool,
    epsilon: f64,
    model_version: u64,
}

#[derive(Default)]
struct TrainLog {
    metrics: String,
    events: Vec<u8>,
}

impl TrainObserver for TrainLog {
    fn on_action(&mut self, session: usize, global: u64, step: &SessionStep) -> Result<()> {
        serde_json::to_writer(
            &mut self.events,
            &TrainEventLine {
                i: global,
                session,
                screen: &step.screen,
                action: &step.action,
                covered: &step.covered,
                exited: step.exited,
                goal: step.goal,
                goal_triggered: step.goal_triggered,
                epsilon: step.epsilon,
                model_version: step.model_version,
            },
        )?;
        self.events.push(b'\n');
        Ok(())
    }

    fn on_train(&mut self, s: &StepStats, version: u64) -> Result<()> {
        use std::fmt::Write as _;
        writeln!(self.metrics, "{},{},{},{},{}", s.step, s.loss, s.buffer_size, s.synced, version).unwrap();
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub trainer: TrainerSummary,
    pub sessions: Vec<SessionStats>,
    pub heat: BTreeMap<FunctionId, u64>,
    /// Absent when no optimizer step ran.
    pub checkpoint: Option<PathBuf>,
}

/// Trains in process and writes `model.ckpt`, `metrics.csv`,
/// `events.jsonl`, `heat.json`, `summary.json`, and the manifest.
pub fn cmd_train(spec: &ExperimentSpec, out: &Path) -> Result<TrainOutcome> {
    spec.validate()?;
    let spec = spec.clone().resolved()?;
    let model = Arc::new(spec.load_app()?);
    let fingerprint = model.fingerprint();
    let featurizer: Arc<dyn Featurizer> = Arc::new(HashFeaturizer::new(spec.encoder, model.function_table.clone())?);
    let mut trainer = Trainer::new(spec.trainer.clone(), featurizer.clone(), spec.encoder, fingerprint.clone())?;
    let mut log = TrainLog {
        metrics: "step,loss,buffer_size,synced,model_version\n".into(),
        ..Default::default()
    };
    let (summary, sessions) = train_in_process(model, featurizer, &mut trainer, &spec.training, &mut NullSink, &mut log)?;
    let heat = trainer.heat().clone();
    let mut files = vec![
        ("metrics.csv", log.metrics.into_bytes()),
        ("events.jsonl", log.events),
        ("heat.json", json_pretty(&heat)),
    ];
    let checkpoint = if summary.steps > 0 {
        let bytes = trainer.checkpoint().to_bytes();
        files.push((CHECKPOINT_FILE, bytes));
        Some(out.join(CHECKPOINT_FILE))
    } else {
        None
    };
    let outcome = TrainOutcome {
        trainer: summary,
        sessions,
        heat,
        checkpoint,
    };
    files.push((
        "summary.json",
        json_pretty(&serde_json::json!({ "trainer": outcome.trainer, "sessions": outcome.sessions })),
    ));
    finish(out, CommandKind::Train, &spec, fingerprint, None, files)?;
    Ok(outcome)
}

#[derive(Serialize)]
struct EvalEventLine<'a> {
    policy: PolicyKind,
    seed: u64,
    #[serde(flatten)]
    event: &'a DirectedEvent,
}

/// Everything a directed command needs before its runs start.
struct Prepared {
    spec: ExperimentSpec,
    model: AppModel,
    fingerprint: String,
    checkpoint: Option<(Checkpoint, ArtifactRef)>,
}

fn prepare(spec: &ExperimentSpec, checkpoint: Option<&Path>) -> Result<Prepared> {
    spec.validate()?;
    let spec = spec.clone().resolved()?;
    let model = spec.load_app()?;
    let checkpoint = match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_checkpoint(&ckpt, &model)?;
            Some((ckpt, ArtifactRef::of(path)?))
        }
        None => None,
    };
    Ok(Prepared {
        fingerprint: model.fingerprint(),
        spec,
        model,
        checkpoint,
    })
}

impl Prepared {
    fn net(&self, kind: PolicyKind) -> Result<Option<PolicyNet>> {
        match kind {
            PolicyKind::Random => Ok(None),
            PolicyKind::Untrained => Ok(Some(PolicyNet::untrained(&self.spec, &self.model)?)),
            PolicyKind::Hawkeye => match &self.checkpoint {
                Some((ckpt, _)) => Ok(Some(PolicyNet::from_checkpoint(ckpt, &self.model)?)),
                None => Err(Error::Validation("the hawkeye policy needs a checkpoint".into())),
            },
        }
    }

    fn heat(&self) -> BTreeMap<FunctionId, u64> {
        self.checkpoint.as_ref().map(|(c, _)| c.meta.heat.clone()).unwrap_or_default()
    }

    fn checkpoint_ref(&self) -> Option<ArtifactRef> {
        self.checkpoint.as_ref().map(|(_, r)| r.clone())
    }
}

/// One directed run. The action RNG is seeded by `seed` alone, so paired
/// policies share their randomness.
pub fn directed_run(
    model: &AppModel,
    net: Option<&PolicyNet>,
    q: Option<&mut QEvaluator>,
    targets: &[FunctionId],
    cfg: &DirectedRunConfig,
    seed: u64,
    on_event: &mut dyn FnMut(&DirectedEvent),
) -> Result<DirectedReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match (net, q) {
        (Some(net), Some(q)) => {
            let mut policy = Policy::Greedy { params: &net.params, q };
            guided_explore(model, &mut policy, targets, cfg, &mut rng, on_event)
        }
        (Some(net), None) => {
            let mut q = QEvaluator::new(net.featurizer.clone());
            let mut policy = Policy::Greedy { params: &net.params, q: &mut q };
            guided_explore(model, &mut policy, targets, cfg, &mut rng, on_event)
        }
        (None, _) => guided_explore(model, &mut Policy::Random, targets, cfg, &mut rng, on_event),
    }
}

fn run_reports(p: &Prepared, kind: PolicyKind, events: &mut Vec<u8>) -> Result<Vec<RunReport>> {
    let net = p.net(kind)?;
    let mut q = net.as_ref().map(|n| QEvaluator::new(n.featurizer.clone()));
    let cfg = p.spec.directed_config();
    let heat = if kind == PolicyKind::Hawkeye { p.heat() } else { BTreeMap::new() };
    let mut reports = Vec::with_capacity(p.spec.seeds.len());
    for &seed in &p.spec.seeds {
        let targets = select_targets(&p.model, &p.spec.targets, seed)?;
        let mut err = None;
        let rep = directed_run(&p.model, net.as_ref(), q.as_mut(), &targets, &cfg, seed, &mut |e| {
            if err.is_none() {
                if let Err(e) = serde_json::to_writer(&mut *events, &EvalEventLine { policy: kind, seed, event: e }) {
                    err = Some(e);
                }
                events.push(b'\n');
            }
        })?;
        if let Some(e) = err {
            return Err(e.into());
        }
        reports.push(RunReport {
            app_fingerprint: p.fingerprint.clone(),
            policy: kind,
            seed,
            budget: cfg.event_budget,
            max_directed_steps: cfg.max_directed_steps,
            covered: rep.covered_count(),
            total_events: rep.total_events,
            loop_escapes: rep.loop_escapes,
            targets: rep.targets,
            heat: heat.clone(),
            manifest: MANIFEST_FILE.into(),
        });
    }
    Ok(reports)
}

fn report_files(reports: &[RunReport], events: Vec<u8>) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let merged = merge_reports(reports)?;
    Ok(vec![
        (REPORTS_FILE, json_pretty(&reports)),
        ("report.csv", render_csv(&merged).into_bytes()),
        ("report.md", render_markdown(&merged).into_bytes()),
        ("events.jsonl", events),
    ])
}

/// Directed runs of `spec.policy` over every seed. With a heat study
/// configured, also writes `heat_study.json` and `heat_study.md`.
pub fn cmd_evaluate(spec: &ExperimentSpec, checkpoint: Option<&Path>, out: &Path) -> Result<Vec<RunReport>> {
    let p = prepare(spec, checkpoint)?;
    let mut events = Vec::new();
    let reports = run_reports(&p, p.spec.policy, &mut events)?;
    let mut files = report_files(&reports, events)?;
    if let Some(hcfg) = &p.spec.heat_study {
        let net = p
            .net(p.spec.policy)?
            .ok_or_else(|| Error::Validation("the heat study needs a network policy".into()))?;
        let functions: Vec<FunctionId> = p.model.function_table.ids().collect();
        let table = heat_study(&p.model, &net, &p.heat(), &functions, hcfg, p.spec.seeds[0])?;
        files.push(("heat_study.json", json_pretty(&table)));
        files.push(("heat_study.md", table.render_markdown().into_bytes()));
    }
    finish(out, CommandKind::Evaluate, &p.spec, p.fingerprint.clone(), p.checkpoint_ref(), files)?;
    Ok(reports)
}

/// Uniform-random walks with the same targets, budgets, and reporting as
/// [`cmd_evaluate`].
pub fn cmd_baseline(spec: &ExperimentSpec, out: &Path) -> Result<Vec<RunReport>> {
    let mut spec = spec.clone();
    spec.policy = PolicyKind::Random;
    let p = prepare(&spec, None)?;
    let mut events = Vec::new();
    let reports = run_reports(&p, PolicyKind::Random, &mut events)?;
    let files = report_files(&reports, events)?;
    finish(out, CommandKind::Baseline, &p.spec, p.fingerprint.clone(), None, files)?;
    Ok(reports)
}

/// Events to cover each changed set under every policy and seed.
pub fn cmd_commit_eval(spec: &ExperimentSpec, checkpoint: Option<&Path>, out: &Path) -> Result<CommitReport> {
    let p = prepare(spec, checkpoint)?;
    let table = &p.model.function_table;
    let sets: Vec<String> = match &p.spec.changed_sets {
        Some(names) => names.clone(),
        None => table.changed_sets.keys().cloned().collect(),
    };
    if sets.is_empty() {
        return Err(Error::Validation("the app defines no changed sets".into()));
    }
    for s in &sets {
        table.changed_set(s)?;
    }
    let cfg = p.spec.directed_config();
    let mut events = Vec::new();
    let mut rows = Vec::new();
    for &kind in &p.spec.commit_policies {
        let net = p.net(kind)?;
        let mut q = net.as_ref().map(|n| QEvaluator::new(n.featurizer.clone()));
        for set in &sets {
            let members = table.changed_set(set)?.to_vec();
            for &seed in &p.spec.seeds {
                let mut err = None;
                let rep = directed_run(&p.model, net.as_ref(), q.as_mut(), &members, &cfg, seed, &mut |e| {
                    let line = serde_json::json!({ "set": set, "policy": kind, "seed": seed, "event": e });
                    if let Err(e) = serde_json::to_writer(&mut events, &line) {
                        err = Some(e);
                    }
                    events.push(b'\n');
                })?;
                if let Some(e) = err {
                    return Err(e.into());
                }
                let (n, all) = events_to_cover_all(&rep.targets, cfg.event_budget);
                rows.push(CommitRow {
                    set: set.clone(),
                    members: members.clone(),
                    seed,
                    policy: kind,
                    events: n,
                    all_covered: all,
                });
            }
        }
    }
    let report = CommitReport {
        app_fingerprint: p.fingerprint.clone(),
        budget: cfg.event_budget,
        summary: report::summarize_commits(&p.spec.commit_policies, &rows),
        policies: p.spec.commit_policies.clone(),
        sets,
        rows,
        manifest: MANIFEST_FILE.into(),
    };
    let files = vec![
        ("commit_eval.json", json_pretty(&report)),
        ("commit_eval.csv", report.render_csv().into_bytes()),
        ("commit_eval.md", report.render_markdown().into_bytes()),
        ("events.jsonl", events),
    ];
    finish(out, CommandKind::CommitEval, &p.spec, p.fingerprint.clone(), p.checkpoint_ref(), files)?;
    Ok(report)
}

/// Merges the `reports.json` of each run directory into `merged.json`,
/// `report.csv`, and `report.md` under `out`.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<MergedReport> {
    if dirs.is_empty() {
        return Err(Error::Validation("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for d in dirs {
        let path = d.join(REPORTS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let mut r: Vec<RunReport> = serde_json::from_str(&text)?;
        runs.append(&mut r);
    }
    let merged = merge_reports(&runs)?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("merged.json"), &json_pretty(&merged))?;
    write_atomic(&out.join("report.csv"), render_csv(&merged).as_bytes())?;
    write_atomic(&out.join("report.md"), render_markdown(&merged).as_bytes())?;
    Ok(merged)
}

/// Writes the app model JSON of `gen` to `out/app.json`.
pub fn cmd_gen_app(gen: &GeneratorSpec, out: &Path) -> Result<(PathBuf, String)> {
    let model = generate_synthetic_app(gen)?;
    fs::create_dir_all(out)?;
    let path = out.join("app.json");
    let mut json = model.to_file_json();
    json.push('\n');
    write_atomic(&path, json.as_bytes())?;
    Ok((path, model.fingerprint()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileCheck {
    pub name: String,
    pub expected: String,
    pub actual: Option<String>,
}

impl FileCheck {
    pub fn identical(&self) -> bool {
        self.actual.as_deref() == Some(self.expected.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub dir: PathBuf,
    pub files: Vec<FileCheck>,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.files.iter().all(FileCheck::identical)
    }
}

/// Re-executes the run recorded in `manifest_path` into `out` and compares
/// every recorded output byte for byte.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayOutcome> {
    let m = Manifest::load(manifest_path)?;
    let ckpt = match &m.checkpoint {
        Some(a) => {
            let actual = sha256_hex(&fs::read(&a.path)?);
            if actual != a.sha256 {
                return Err(Error::Validation(format!("checkpoint {} changed since the run", a.path.display())));
            }
            Some(a.path.as_path())
        }
        None => None,
    };
    match m.command {
        CommandKind::Train => cmd_train(&m.spec, out).map(drop)?,
        CommandKind::Evaluate => cmd_evaluate(&m.spec, ckpt, out).map(drop)?,
        CommandKind::Baseline => cmd_baseline(&m.spec, out).map(drop)?,
        CommandKind::CommitEval => cmd_commit_eval(&m.spec, ckpt, out).map(drop)?,
    }
    let fresh = Manifest::load(out.join(MANIFEST_FILE))?;
    if fresh.app_fingerprint != m.app_fingerprint {
        return Err(Error::Validation(format!(
            "app fingerprint {} differs from recorded {}",
            fresh.app_fingerprint, m.app_fingerprint
        )));
    }
    let files = m
        .outputs
        .iter()
        .map(|(name, expected)| FileCheck {
            name: name.clone(),
            expected: expected.clone(),
            actual: fs::read(out.join(name)).ok().map(|b| sha256_hex(&b)),
        })
        .collect();
    Ok(ReplayOutcome {
        dir: out.to_path_buf(),
        files,
    })
}

/// Saves a checkpoint where `cmd_evaluate` can find it.
pub fn save_model(ckpt: &Checkpoint, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(ckpt, &path)?;
    Ok(path)
}
