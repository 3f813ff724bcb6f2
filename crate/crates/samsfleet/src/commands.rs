//! The work behind each CLI subcommand. Every command writes `manifest.json`
//! into its output directory; feeding that file back reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use samsfleet_core::a2c::{calibrate, train, ActorNet, ActorPolicy, Agent, CurvePoint, PolicyMode, TrainConfig};
use samsfleet_core::assignment::{AssignmentInstance, AssignmentResult, AssignmentStrategy};
use samsfleet_core::mdp::StateConfig;
use samsfleet_core::metrics::{compute_metrics, ServiceMetrics};
use samsfleet_core::rng::derive_seed;
use samsfleet_core::sim::{run_episode, EpisodeOptions, EpisodeTrace, NoRepositioning};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{resolve_path, AgentMode, Resolved, ScenarioConfig};
use crate::error::{Error, Result};
use crate::ingest::{ingest, IngestOptions, IngestReport, StoreMeta, TripStore, STORE_VERSION};
use crate::io::{read_curve, read_json, read_trace, write_curve, write_events, write_json, write_trace};
use crate::report::{emit_comparison, emit_report, paired_rows, summarize, Comparison, MetricsReport};
use crate::runner::ParallelRunner;
use samsfleet_core::a2c::RolloutRunner;

pub const CHECKPOINT_FILE: &str = "agent.ckpt";
pub const CURVE_FILE: &str = "curve.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Salt separating calibration seeds from training and evaluation seeds.
const CALIBRATION_SALT: u64 = 0xCA11_B0A7_0000_0000;

pub fn calibration_seeds(train: &TrainConfig) -> Vec<u64> {
    (0..train.calibration_episodes as u64).map(|k| derive_seed(train.seed ^ CALIBRATION_SALT, k)).collect()
}

/// A repositioning rule ready to drive episodes.
#[derive(Debug, Clone)]
pub enum Policy {
    None,
    Actor { actor: Box<ActorNet>, state: StateConfig, mode: PolicyMode },
}

impl Policy {
    pub fn episode(&self, r: &Resolved, seed: u64, opts: EpisodeOptions) -> samsfleet_core::Result<EpisodeTrace> {
        let world = r.scenario.world(seed)?;
        match self {
            Policy::None => run_episode(world, &mut NoRepositioning, seed, opts),
            Policy::Actor { actor, state, mode } => {
                let mut p = ActorPolicy::new(actor, *state, *mode, derive_seed(seed, 7));
                run_episode(world, &mut p, seed, opts)
            }
        }
    }
}

fn load_actor(path: &Path, cfg: &ScenarioConfig, r: &Resolved) -> Result<Policy> {
    let ck = Checkpoint::read(path)?;
    let want = r.train.state_config();
    if ck.state != want {
        return Err(Error::Data(format!(
            "{} observes {:?} but the {:?} agent of this config needs {:?}",
            path.display(),
            ck.state,
            cfg.agent,
            want
        )));
    }
    if ck.net.n_zones != r.scenario.region.n_zones() {
        return Err(Error::Data(format!("{} was trained on {} zones, the scenario has {}", path.display(), ck.net.n_zones, r.scenario.region.n_zones())));
    }
    let agent = ck.into_agent()?;
    Ok(Policy::Actor { actor: Box::new(agent.actor), state: agent.state, mode: r.train.eval_mode })
}

/// The policy a config asks for.
pub fn config_policy(cfg: &ScenarioConfig, r: &Resolved, data_root: &Path) -> Result<Policy> {
    match (cfg.agent, &cfg.checkpoint) {
        (AgentMode::BaselineNone, _) => Ok(Policy::None),
        (_, Some(path)) => load_actor(&resolve_path(path, data_root), cfg, r),
        (mode, None) => Err(Error::Config(format!("agent {mode:?} needs a checkpoint; set checkpoint or use agent=baseline_none"))),
    }
}

fn policy_label(cfg: &ScenarioConfig) -> &'static str {
    match cfg.agent {
        AgentMode::Isr => "isr",
        AgentMode::Egr => "egr",
        AgentMode::BaselineNone => "baseline_none",
    }
}

fn run_seeds(r: &Resolved, policy: &Policy, seeds: &[u64], opts: EpisodeOptions) -> Result<Vec<EpisodeTrace>> {
    let results = ParallelRunner.run_all(seeds, &|s| policy.episode(r, s, opts));
    Ok(results.into_iter().collect::<samsfleet_core::Result<Vec<_>>>()?)
}

fn metrics_of(traces: &[EpisodeTrace]) -> Result<Vec<ServiceMetrics>> {
    Ok(traces.iter().map(compute_metrics).collect::<samsfleet_core::Result<Vec<_>>>()?)
}

/// Ingest a CSV into a trip store directory plus `ingest_report.json`.
pub fn cmd_ingest(input: &Path, opts: IngestOptions, out: &Path) -> Result<IngestReport> {
    let f = fs::File::open(input).map_err(Error::io(input))?;
    let (trips, report) = ingest(std::io::BufReader::new(f), &opts)?;
    let store = TripStore { meta: StoreMeta { version: STORE_VERSION, frame: opts.frame, origin: opts.origin, report: report.clone() }, trips };
    store.write(out)?;
    write_json(&out.join("ingest_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimulateOptions {
    pub episodes: usize,
    pub events: bool,
}

/// Episode `k` runs on `derive_seed(cfg.seed, k)`. Writes traces, optional
/// event logs, the report files and the manifest.
pub fn cmd_simulate(cfg: &ScenarioConfig, data_root: &Path, out: &Path, opts: SimulateOptions) -> Result<MetricsReport> {
    let r = cfg.resolve(data_root)?;
    let policy = config_policy(cfg, &r, data_root)?;
    let seeds: Vec<u64> = (0..opts.episodes.max(1) as u64).map(|k| derive_seed(cfg.seed, k)).collect();
    let traces = run_seeds(&r, &policy, &seeds, EpisodeOptions { record_events: opts.events, audit: false })?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    write_json(&out.join(MANIFEST_FILE), cfg)?;
    for (k, t) in traces.iter().enumerate() {
        write_trace(&out.join(format!("trace-{k}.json")), t)?;
        if opts.events {
            write_events(&out.join(format!("events-{k}.jsonl")), &t.events)?;
        }
    }
    let report = MetricsReport::new(&cfg.name, policy_label(cfg), seeds, metrics_of(&traces)?);
    emit_report(out, &report, &r.scenario.region)?;
    Ok(report)
}

/// Recompute a report from saved traces.
pub fn cmd_report(traces: &[PathBuf], scenario: &str, policy: &str, out: &Path) -> Result<MetricsReport> {
    if traces.is_empty() {
        return Err(Error::Config("report needs at least one trace".into()));
    }
    let traces = traces.iter().map(|p| read_trace(p)).collect::<Result<Vec<_>>>()?;
    let region = traces[0].region.clone();
    if traces.iter().any(|t| t.region != region) {
        return Err(Error::Data("traces come from different regions".into()));
    }
    let seeds = traces.iter().map(|t| t.seed).collect();
    let report = MetricsReport::new(scenario, policy, seeds, metrics_of(&traces)?);
    emit_report(out, &report, &region)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    /// Continue from `out/agent.ckpt` when it exists.
    pub resume: bool,
    /// Write the checkpoint and curve every this many updates; 0 writes only at the end.
    pub checkpoint_every: u64,
}

/// Train, writing `agent.ckpt`, `curve.csv` and a manifest with the calibrated
/// weights and the checkpoint path filled in.
pub fn cmd_train<F>(cfg: &ScenarioConfig, data_root: &Path, out: &Path, opts: TrainOptions, mut progress: F) -> Result<Agent>
where
    F: FnMut(&Agent, &CurvePoint),
{
    if cfg.agent == AgentMode::BaselineNone {
        return Err(Error::Config("baseline_none has nothing to train".into()));
    }
    let r = cfg.resolve(data_root)?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let curve_path = out.join(CURVE_FILE);
    let mut agent = if opts.resume && ckpt_path.exists() {
        let ck = Checkpoint::read(&ckpt_path)?;
        if ck.seed != r.train.seed {
            return Err(Error::Data(format!("{} was trained with seed {}, config has {}", ckpt_path.display(), ck.seed, r.train.seed)));
        }
        let mut a = ck.into_agent()?;
        if a.state != r.train.state_config() || a.actor.cfg.n_zones != r.scenario.region.n_zones() {
            return Err(Error::Data(format!("{} does not fit this scenario", ckpt_path.display())));
        }
        a.actor_opt.lr = r.train.actor_lr;
        a.critic_opt.lr = r.train.critic_lr;
        if curve_path.exists() {
            a.curve = read_curve(&curve_path)?.into_iter().filter(|p| p.episode <= a.episode).collect();
        }
        a
    } else {
        let weights = match cfg.weights {
            Some(w) => w,
            None => calibrate(&r.scenario, &calibration_seeds(&r.train), &ParallelRunner)?.0,
        };
        Agent::new(&r.scenario, &r.train, weights)?
    };
    let mut manifest = cfg.clone();
    manifest.weights = Some(agent.weights);
    manifest.checkpoint = Some(fs::canonicalize(out).map_err(Error::io(out))?.join(CHECKPOINT_FILE));
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    let save = |a: &Agent| -> Result<()> {
        Checkpoint::from_agent(a, r.train.seed).write(&ckpt_path)?;
        write_curve(&curve_path, &a.curve)
    };
    let mut failure = None;
    let every = opts.checkpoint_every;
    let run = train(&mut agent, &r.scenario, &r.train, &ParallelRunner, |a, p| {
        progress(a, p);
        let updates = a.episode.div_ceil(r.train.workers as u64);
        if every > 0 && updates % every == 0 {
            if let Err(e) = save(a) {
                failure = Some(e);
                return Err(samsfleet_core::Error::Invariant("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    run?;
    save(&agent)?;
    Ok(agent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub label: String,
    /// Absent for no repositioning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl PolicySpec {
    /// `label=none` or `label=path/to/agent.ckpt`.
    pub fn parse(s: &str) -> Result<Self> {
        let (label, target) = s.split_once('=').ok_or_else(|| Error::Config(format!("policy {s:?} is not label=none|checkpoint")))?;
        if label.is_empty() {
            return Err(Error::Config(format!("policy {s:?} has an empty label")));
        }
        let checkpoint = (target != "none").then(|| PathBuf::from(target));
        Ok(PolicySpec { label: label.into(), checkpoint })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    pub scenarios: Vec<ScenarioConfig>,
    /// The first policy is the reference of the paired comparisons.
    pub policies: Vec<PolicySpec>,
}

impl EvalManifest {
    pub fn read(path: &Path) -> Result<Self> {
        read_json::<Self>(path).map_err(|e| match e {
            Error::Data(m) => Error::Config(m),
            e => e,
        })
    }
}

/// Every policy on the evaluation seeds of every scenario, with paired
/// differences against the first policy.
pub fn cmd_evaluate(m: &EvalManifest, data_root: &Path, out: &Path) -> Result<Comparison> {
    if m.scenarios.is_empty() || m.policies.is_empty() {
        return Err(Error::Config("evaluate needs at least one scenario and one policy".into()));
    }
    let mut cmp = Comparison { rows: Vec::new(), paired: Vec::new() };
    for cfg in &m.scenarios {
        let r = cfg.resolve(data_root)?;
        let seeds: Vec<u64> = (0..r.train.eval_episodes as u64).map(|k| r.train.eval_seed(k)).collect();
        let mut results: Vec<(String, Vec<ServiceMetrics>)> = Vec::new();
        for p in &m.policies {
            let policy = match &p.checkpoint {
                None => Policy::None,
                Some(path) => load_actor(&resolve_path(path, data_root), cfg, &r)?,
            };
            let metrics = metrics_of(&run_seeds(&r, &policy, &seeds, EpisodeOptions { record_events: false, audit: false })?)?;
            cmp.rows.push(summarize(&cfg.name, &p.label, &metrics));
            results.push((p.label.clone(), metrics));
        }
        let (ref_label, ref_metrics) = &results[0];
        for (label, metrics) in &results[1..] {
            cmp.paired.extend(paired_rows(&cfg.name, (ref_label, ref_metrics), (label, metrics)));
        }
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;
    write_json(&out.join(MANIFEST_FILE), m)?;
    emit_comparison(out, &cmp)?;
    Ok(cmp)
}

pub fn cmd_assign(instance: &Path, strategy: AssignmentStrategy) -> Result<AssignmentResult> {
    let inst: AssignmentInstance = read_json(instance)?;
    if !(inst.alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be non-negative, got {}", inst.alpha)));
    }
    Ok(strategy.solve(&inst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy2;

    fn quick(agent: AgentMode) -> ScenarioConfig {
        let mut c = toy2();
        c.agent = agent;
        c.window.end = 900.0;
        c.train.episodes = 4;
        c.train.workers = 2;
        c.train.eval_episodes = 3;
        c.train.hidden = 4;
        c.train.calibration_episodes = 2;
        c
    }

    #[test]
    fn simulate_zero_demand_serves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick(AgentMode::BaselineNone);
        c.demand = crate::config::DemandSpec::Synthetic { rates: vec![0.0, 0.0], od: vec![vec![1.0, 0.0]; 2] };
        let rep = cmd_simulate(&c, dir.path(), dir.path(), SimulateOptions { episodes: 1, events: true }).unwrap();
        assert_eq!(rep.summary.served, 0);
        assert_eq!(rep.summary.mean_wait_s, None);
        assert!(dir.path().join("events-0.jsonl").exists());
    }

    #[test]
    fn learned_agent_needs_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_simulate(&quick(AgentMode::Isr), dir.path(), dir.path(), SimulateOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn train_resume_continues_curve() {
        let full = tempfile::tempdir().unwrap();
        let c = quick(AgentMode::Isr);
        let a = cmd_train(&c, full.path(), full.path(), TrainOptions::default(), |_, _| {}).unwrap();
        assert_eq!(a.episode, 4);

        let part = tempfile::tempdir().unwrap();
        let mut half = c.clone();
        half.train.episodes = 2;
        cmd_train(&half, part.path(), part.path(), TrainOptions::default(), |_, _| {}).unwrap();
        let b = cmd_train(&c, part.path(), part.path(), TrainOptions { resume: true, checkpoint_every: 0 }, |_, _| {}).unwrap();
        assert_eq!(b.curve.iter().map(|p| p.episode).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(b.curve, a.curve);
        assert_eq!(b.actor.store.values, a.actor.store.values);
        assert_eq!(fs::read(part.path().join(CURVE_FILE)).unwrap(), fs::read(full.path().join(CURVE_FILE)).unwrap());
    }

    #[test]
    fn evaluate_identical_policies() {
        let dir = tempfile::tempdir().unwrap();
        let m = EvalManifest {
            scenarios: vec![quick(AgentMode::BaselineNone)],
            policies: vec![PolicySpec::parse("a=none").unwrap(), PolicySpec::parse("b=none").unwrap()],
        };
        let cmp = cmd_evaluate(&m, dir.path(), dir.path()).unwrap();
        assert_eq!(cmp.rows.len(), 2);
        assert!(!cmp.paired.is_empty());
        assert!(cmp.paired.iter().all(|p| p.mean_diff == 0.0));
        assert_eq!(EvalManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    }

    #[test]
    fn policy_spec_parsing() {
        assert_eq!(PolicySpec::parse("base=none").unwrap().checkpoint, None);
        assert_eq!(PolicySpec::parse("isr=run/agent.ckpt").unwrap().checkpoint, Some(PathBuf::from("run/agent.ckpt")));
        assert!(PolicySpec::parse("nolabel").is_err());
        assert!(PolicySpec::parse("=none").is_err());
    }
}
