//! Synchronous advantage actor-critic over zone graphs.
//!
//! The actor maps a [`ZoneGraph`] to one Dirichlet concentration row per
//! origin zone; the critic maps it to a scalar value. Advantages are
//! full-episode Monte-Carlo returns minus the critic's estimate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::diffnet::dirichlet::{self, CONC_EPS};
use crate::diffnet::{gcn_propagation, global_sum_pool, neighbor_sum_pool, Adam, Dense, GatLayer, GcnLayer, ParamStore, Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::mdp::{build_state, calibrate_weights, RepositionAction, RewardWeights, StateConfig, ZoneGraph};
use crate::metrics::{compute_metrics, ServiceMetrics};
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::scenario::Scenario;
use crate::sim::{run_episode, Decision, EpisodeOptions, EpisodeTallies, EpisodeTrace, NoRepositioning, RepositioningPolicy, SimWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Draw each row from its Dirichlet.
    Sample,
    /// Use the Dirichlet mean of each row.
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_zones: usize,
    pub feature_width: usize,
    pub fleet_size: usize,
    pub hidden: usize,
    pub gcn_layers: usize,
    /// Temperature of the travel-time kernel in the convolution.
    pub tau: f64,
    pub conc_eps: f64,
}

impl NetConfig {
    pub fn new(n_zones: usize, feature_width: usize, fleet_size: usize) -> Self {
        NetConfig { n_zones, feature_width, fleet_size, hidden: 32, gcn_layers: 4, tau: 1.0, conc_eps: CONC_EPS }
    }
}

/// Network inputs derived once per observation.
struct Inputs {
    features: Tensor2,
    travel: Tensor2,
    propagation: Tensor2,
}

fn inputs(cfg: &NetConfig, g: &ZoneGraph) -> Result<Inputs> {
    if g.n_zones != cfg.n_zones || g.width() != cfg.feature_width {
        return Err(Error::Shape(format!(
            "network expects {} zones x {} features, observation has {} x {}",
            cfg.n_zones,
            cfg.feature_width,
            g.n_zones,
            g.width()
        )));
    }
    let travel = g.scaled_adjacency();
    let propagation = gcn_propagation(&travel, cfg.tau)?;
    Ok(Inputs { features: g.scaled_features(cfg.fleet_size), travel, propagation })
}

#[derive(Debug, Clone, PartialEq)]
struct Trunk {
    gat: GatLayer,
    gcn: Vec<GcnLayer>,
}

impl Trunk {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &NetConfig, rng: &mut SimRng) -> Result<Self> {
        let gat = GatLayer::new(store, &format!("{prefix}.gat"), cfg.feature_width, cfg.hidden, rng)?;
        let gcn = (0..cfg.gcn_layers)
            .map(|k| GcnLayer::new(store, &format!("{prefix}.gcn{k}"), cfg.hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trunk { gat, gcn })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Inputs) -> Result<Var> {
        let feats = tape.constant(x.features.clone());
        let travel = tape.constant(x.travel.clone());
        let prop = tape.constant(x.propagation.clone());
        let (mut h, _) = self.gat.forward(tape, store, feats, travel)?;
        for layer in &self.gcn {
            h = layer.forward(tape, store, h, prop)?;
        }
        Ok(h)
    }
}

fn head(store: &mut ParamStore, prefix: &str, dims: [usize; 4], rng: &mut SimRng) -> Result<[Dense; 3]> {
    Ok([
        Dense::new(store, &format!("{prefix}.fc0"), dims[0], dims[1], rng)?,
        Dense::new(store, &format!("{prefix}.fc1"), dims[1], dims[2], rng)?,
        Dense::new(store, &format!("{prefix}.fc2"), dims[2], dims[3], rng)?,
    ])
}

fn run_head(head: &[Dense; 3], tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
    let h = head[0].forward(tape, store, x)?;
    let h = tape.relu(h);
    let h = head[1].forward(tape, store, h)?;
    let h = tape.relu(h);
    head[2].forward(tape, store, h)
}

/// Policy network: attention, graph convolutions, neighbour pooling and a
/// three-layer head ending in `softplus + eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorNet {
    pub cfg: NetConfig,
    pub store: ParamStore,
    trunk: Trunk,
    head: [Dense; 3],
}

impl ActorNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let trunk = Trunk::new(&mut store, "actor", &cfg, &mut rng)?;
        let head = head(&mut store, "actor", [2 * cfg.hidden, cfg.hidden, cfg.hidden, cfg.n_zones], &mut rng)?;
        Ok(ActorNet { cfg, store, trunk, head })
    }

    fn conc_var(&self, tape: &mut Tape, store: &ParamStore, x: &Inputs) -> Result<Var> {
        let h = self.trunk.forward(tape, store, x)?;
        let pooled = neighbor_sum_pool(tape, h)?;
        let out = run_head(&self.head, tape, store, pooled)?;
        let sp = tape.softplus(out);
        Ok(tape.add_scalar(sp, self.cfg.conc_eps))
    }

    /// Concentrations on a tape, reading parameters from `store` (same layout as `self.store`).
    pub fn concentrations_with(&self, tape: &mut Tape, store: &ParamStore, g: &ZoneGraph) -> Result<Var> {
        let x = inputs(&self.cfg, g)?;
        self.conc_var(tape, store, &x)
    }

    /// `n × n` concentrations; row `i` parameterizes the destinations of zone `i`.
    pub fn concentrations(&self, g: &ZoneGraph) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let v = self.concentrations_with(&mut tape, &self.store, g)?;
        let c = tape.value(v).clone();
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("actor produced non-finite concentrations: {:?}", c.data)));
        }
        Ok(c)
    }
}

/// Value network: same trunk shape, global sum pooling, three-layer head to a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub cfg: NetConfig,
    pub store: ParamStore,
    trunk: Trunk,
    head: [Dense; 3],
}

impl CriticNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let trunk = Trunk::new(&mut store, "critic", &cfg, &mut rng)?;
        let head = head(&mut store, "critic", [cfg.hidden, cfg.hidden, cfg.hidden, 1], &mut rng)?;
        Ok(CriticNet { cfg, store, trunk, head })
    }

    pub fn value_with(&self, tape: &mut Tape, store: &ParamStore, g: &ZoneGraph) -> Result<Var> {
        let x = inputs(&self.cfg, g)?;
        let h = self.trunk.forward(tape, store, &x)?;
        let pooled = global_sum_pool(tape, h)?;
        run_head(&self.head, tape, store, pooled)
    }

    pub fn value(&self, g: &ZoneGraph) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.value_with(&mut tape, &self.store, g)?;
        let v = tape.value(v).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("critic produced a non-finite value".into()));
        }
        Ok(v)
    }
}

/// Pick an action for `g`. Rows are clamped into the simplex interior and renormalized.
pub fn act(actor: &ActorNet, g: &ZoneGraph, mode: PolicyMode, rng: &mut SimRng) -> Result<(RepositionAction, f64)> {
    let conc = actor.concentrations(g)?;
    let mut rows = Vec::with_capacity(conc.rows);
    let mut logpdf = 0.0;
    for i in 0..conc.rows {
        let c = conc.row(i);
        let x = match mode {
            PolicyMode::Sample => dirichlet::sample(c, rng)?,
            PolicyMode::Mean => dirichlet::mean(c)?,
        };
        let x = dirichlet::interior(&x);
        logpdf += dirichlet::logpdf(c, &x)?;
        rows.push(x);
    }
    Ok((RepositionAction::new(rows)?, logpdf))
}

/// Repositioning policy backed by an actor network.
#[derive(Debug, Clone)]
pub struct ActorPolicy<'a> {
    pub actor: &'a ActorNet,
    pub state: StateConfig,
    pub mode: PolicyMode,
    pub rng: SimRng,
}

impl<'a> ActorPolicy<'a> {
    pub fn new(actor: &'a ActorNet, state: StateConfig, mode: PolicyMode, seed: u64) -> Self {
        ActorPolicy { actor, state, mode, rng: rng_from_seed(seed) }
    }
}

impl RepositioningPolicy for ActorPolicy<'_> {
    fn decide(&mut self, world: &SimWorld) -> Result<Option<Decision>> {
        let g = build_state(world, &self.state)?;
        let (action, lp) = act(self.actor, &g, self.mode, &mut self.rng)?;
        Ok(Some(Decision { state: Some(g), action, log_prob: Some(lp) }))
    }
}

/// Discounted reward-to-go with zero terminal value, and its difference from `values`.
pub fn returns_and_advantages(rewards: &[f64], values: &[f64], gamma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() {
        return Err(Error::Shape(format!("{} rewards vs {} values", rewards.len(), values.len())));
    }
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        returns[t] = acc;
    }
    let adv = returns.iter().zip(values).map(|(g, b)| g - b).collect();
    Ok((returns, adv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    #[serde(default)]
    pub entropy_coef: f64,
    pub episodes: u64,
    /// Episodes rolled out per synchronous update.
    pub workers: usize,
    pub seed: u64,
    /// Evaluate after every this many updates; 0 disables periodic evaluation.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default)]
    pub eval_mode: PolicyMode,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    /// Multiplies every reward before returns are formed.
    #[serde(default = "one")]
    pub reward_scale: f64,
    /// Standardize advantages over each batch.
    #[serde(default)]
    pub normalize_advantages: bool,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    /// Multiply the score term at decision `t` by `gamma^t`.
    #[serde(default = "yes")]
    pub discount_score: bool,
    /// Baseline episodes used to calibrate the reward weights.
    #[serde(default = "default_calibration")]
    pub calibration_episodes: usize,
    /// Forecast columns in the observation; absent for the forecast-free agent.
    #[serde(default)]
    pub forecast_horizon: Option<usize>,
}

fn default_eval_episodes() -> usize {
    20
}
fn default_hidden() -> usize {
    32
}
fn default_q() -> usize {
    4
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_calibration() -> usize {
    8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            entropy_coef: 0.0,
            episodes: 500,
            workers: 4,
            seed: 0,
            eval_every: 0,
            eval_episodes: 20,
            eval_mode: PolicyMode::Mean,
            hidden: 32,
            q: 4,
            reward_scale: 1.0,
            normalize_advantages: false,
            max_grad_norm: None,
            discount_score: true,
            calibration_episodes: 8,
            forecast_horizon: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0,1], got {}", self.gamma));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.workers == 0 || self.hidden == 0 || self.calibration_episodes == 0 {
            return bad("workers, hidden and calibration_episodes must be positive".into());
        }
        if !(self.reward_scale > 0.0) || !(self.entropy_coef >= 0.0) {
            return bad("reward_scale must be positive and entropy_coef non-negative".into());
        }
        if matches!(self.max_grad_norm, Some(m) if !(m > 0.0)) {
            return bad("max_grad_norm must be positive".into());
        }
        Ok(())
    }

    pub fn state_config(&self) -> StateConfig {
        StateConfig { q: self.q, forecast_horizon: self.forecast_horizon }
    }

    pub fn train_seed(&self, episode: u64) -> u64 {
        derive_seed(self.seed, episode)
    }

    pub fn policy_seed(&self, episode: u64) -> u64 {
        derive_seed(self.seed ^ 0x5A5A_0000_0000_0001, episode)
    }

    /// Seeds never used for training.
    pub fn eval_seed(&self, k: u64) -> u64 {
        derive_seed(self.seed ^ 0xE7A1_0000_0000_0000, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    /// Mean undiscounted episode return under the calibrated weights (unscaled).
    pub mean_return: f64,
    pub transitions: usize,
}

struct Transition<'a> {
    state: &'a ZoneGraph,
    action: Tensor2,
    ret: f64,
    adv: f64,
    t: usize,
}

fn clip(store: &mut ParamStore, max: Option<f64>) -> f64 {
    let norm = store.grad_norm();
    if let Some(m) = max {
        if norm > m {
            store.scale_grads(m / norm);
        }
    }
    norm
}

/// One synchronous actor and critic update from a batch of finished episodes.
pub fn update(
    actor: &mut ActorNet,
    critic: &mut CriticNet,
    actor_opt: &mut Adam,
    critic_opt: &mut Adam,
    batch: &[EpisodeTrace],
    cfg: &TrainConfig,
    weights: RewardWeights,
) -> Result<UpdateStats> {
    let mut transitions = Vec::new();
    let mut total_return = 0.0;
    for trace in batch {
        let delta = trace.config.step;
        let recs: Vec<_> = trace.mdp.iter().filter(|r| r.state.is_some()).collect();
        let rewards: Vec<f64> = recs.iter().map(|r| r.reward(weights, delta) * cfg.reward_scale).collect();
        total_return += trace.mdp.iter().map(|r| r.reward(weights, delta)).sum::<f64>();
        let values = recs.iter().map(|r| critic.value(r.state.as_ref().expect("filtered"))).collect::<Result<Vec<_>>>()?;
        let (returns, adv) = returns_and_advantages(&rewards, &values, cfg.gamma)?;
        for (t, rec) in recs.iter().enumerate() {
            transitions.push(Transition {
                state: rec.state.as_ref().expect("filtered"),
                action: rec.action.to_tensor(),
                ret: returns[t],
                adv: adv[t],
                t,
            });
        }
    }
    let mut stats = UpdateStats { transitions: transitions.len(), ..UpdateStats::default() };
    if batch.is_empty() || transitions.is_empty() {
        return Ok(stats);
    }
    stats.mean_return = total_return / batch.len() as f64;
    if cfg.normalize_advantages && transitions.len() > 1 {
        let n = transitions.len() as f64;
        let m = transitions.iter().map(|t| t.adv).sum::<f64>() / n;
        let sd = libm::sqrt(transitions.iter().map(|t| (t.adv - m) * (t.adv - m)).sum::<f64>() / n);
        for t in &mut transitions {
            t.adv = (t.adv - m) / (sd + 1e-8);
        }
    }
    let episodes = batch.len() as f64;
    let n = transitions.len() as f64;

    actor.store.zero_grads();
    let mut params = core::mem::take(&mut actor.store);
    let mut actor_loss = 0.0;
    for tr in &transitions {
        let mut tape = Tape::new();
        let conc = actor.concentrations_with(&mut tape, &params, tr.state)?;
        let lp = tape.dirichlet_logpdf(conc, &tr.action)?;
        let discount = if cfg.discount_score { libm::pow(cfg.gamma, tr.t as f64) } else { 1.0 };
        let mut loss = tape.scale(lp, -discount * tr.adv / episodes);
        if cfg.entropy_coef > 0.0 {
            let ent = tape.dirichlet_entropy(conc)?;
            let bonus = tape.scale(ent, -cfg.entropy_coef / episodes);
            loss = tape.add(loss, bonus)?;
        }
        actor_loss += tape.value(loss).item();
        tape.backward(loss, &mut params)?;
    }
    actor.store = params;

    critic.store.zero_grads();
    let mut params = core::mem::take(&mut critic.store);
    let mut critic_loss = 0.0;
    for tr in &transitions {
        let mut tape = Tape::new();
        let v = critic.value_with(&mut tape, &params, tr.state)?;
        let target = tape.constant(Tensor2::scalar(tr.ret));
        let diff = tape.sub(v, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.scale(sq, 1.0 / n);
        critic_loss += tape.value(loss).item();
        tape.backward(loss, &mut params)?;
    }
    critic.store = params;

    if !actor_loss.is_finite() || !critic_loss.is_finite() {
        return Err(Error::NonFinite(format!("loss diverged: actor {actor_loss}, critic {critic_loss}")));
    }
    stats.actor_loss = actor_loss;
    stats.critic_loss = critic_loss;
    stats.actor_grad_norm = clip(&mut actor.store, cfg.max_grad_norm);
    stats.critic_grad_norm = clip(&mut critic.store, cfg.max_grad_norm);
    if !stats.actor_grad_norm.is_finite() || !stats.critic_grad_norm.is_finite() {
        return Err(Error::NonFinite("non-finite gradient".into()));
    }
    actor_opt.step(&mut actor.store);
    critic_opt.step(&mut critic.store);
    Ok(stats)
}

/// Runs independent rollouts; implementations may parallelize as long as
/// results come back in input order.
pub trait RolloutRunner {
    fn run_all(&self, seeds: &[u64], job: &(dyn Fn(u64) -> Result<EpisodeTrace> + Sync)) -> Vec<Result<EpisodeTrace>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SerialRunner;

impl RolloutRunner for SerialRunner {
    fn run_all(&self, seeds: &[u64], job: &(dyn Fn(u64) -> Result<EpisodeTrace> + Sync)) -> Vec<Result<EpisodeTrace>> {
        seeds.iter().map(|&s| job(s)).collect()
    }
}

fn collect(results: Vec<Result<EpisodeTrace>>) -> Result<Vec<EpisodeTrace>> {
    results.into_iter().collect()
}

const QUIET: EpisodeOptions = EpisodeOptions { record_events: false, audit: false };

/// Reward weights from no-repositioning rollouts on `seeds`, with the pooled tallies.
pub fn calibrate(scenario: &Scenario, seeds: &[u64], runner: &dyn RolloutRunner) -> Result<(RewardWeights, EpisodeTallies)> {
    let traces = collect(runner.run_all(seeds, &|s| run_episode(scenario.world(s)?, &mut NoRepositioning, s, QUIET)))?;
    let mut pooled = EpisodeTallies::default();
    for t in &traces {
        pooled.total_wait += t.tallies.total_wait;
        pooled.served += t.tallies.served;
        pooled.requests += t.tallies.requests;
    }
    Ok((calibrate_weights(pooled.total_wait, pooled.served, pooled.requests)?, pooled))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Training episodes consumed so far.
    pub episode: u64,
    pub mean_reward: f64,
    pub eval_mean_wait: Option<f64>,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

/// Everything a training run mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub state: StateConfig,
    pub weights: RewardWeights,
    pub episode: u64,
    pub curve: Vec<CurvePoint>,
}

impl Agent {
    pub fn new(scenario: &Scenario, cfg: &TrainConfig, weights: RewardWeights) -> Result<Self> {
        cfg.validate()?;
        let state = cfg.state_config();
        let mut net = NetConfig::new(scenario.region.n_zones(), state.feature_width(), scenario.sim.fleet_size);
        net.hidden = cfg.hidden;
        let actor = ActorNet::new(net, derive_seed(cfg.seed, u64::MAX))?;
        let critic = CriticNet::new(net, derive_seed(cfg.seed, u64::MAX - 1))?;
        let actor_opt = Adam::new(&actor.store, cfg.actor_lr);
        let critic_opt = Adam::new(&critic.store, cfg.critic_lr);
        Ok(Agent { actor, critic, actor_opt, critic_opt, state, weights, episode: 0, curve: Vec::new() })
    }

    pub fn rollout(&self, scenario: &Scenario, world_seed: u64, mode: PolicyMode, policy_seed: u64, opts: EpisodeOptions) -> Result<EpisodeTrace> {
        let mut policy = ActorPolicy::new(&self.actor, self.state, mode, policy_seed);
        run_episode(scenario.world(world_seed)?, &mut policy, world_seed, opts)
    }

    /// Roll out one batch, update, and append a curve point.
    pub fn train_iteration(&mut self, scenario: &Scenario, cfg: &TrainConfig, runner: &dyn RolloutRunner) -> Result<CurvePoint> {
        let left = cfg.episodes.saturating_sub(self.episode);
        let batch = (cfg.workers as u64).min(left.max(1));
        let first = self.episode;
        let seeds: Vec<u64> = (first..first + batch).collect();
        let traces = {
            let this = &*self;
            collect(runner.run_all(&seeds, &|e| {
                this.rollout(scenario, cfg.train_seed(e), PolicyMode::Sample, cfg.policy_seed(e), QUIET)
            }))?
        };
        let stats = update(
            &mut self.actor,
            &mut self.critic,
            &mut self.actor_opt,
            &mut self.critic_opt,
            &traces,
            cfg,
            self.weights,
        )?;
        self.episode += batch;
        let updates = self.episode.div_ceil(cfg.workers as u64);
        let eval_mean_wait = if cfg.eval_every > 0 && updates.is_multiple_of(cfg.eval_every) {
            let m = self.evaluate(scenario, cfg, runner)?;
            let waits: Vec<f64> = m.iter().filter_map(|m| m.mean_wait).collect();
            crate::metrics::mean(&waits)
        } else {
            None
        };
        let point = CurvePoint {
            episode: self.episode,
            mean_reward: stats.mean_return,
            eval_mean_wait,
            actor_grad_norm: stats.actor_grad_norm,
            critic_grad_norm: stats.critic_grad_norm,
        };
        self.curve.push(point.clone());
        Ok(point)
    }

    /// Metrics on the held-out evaluation seeds.
    pub fn evaluate(&self, scenario: &Scenario, cfg: &TrainConfig, runner: &dyn RolloutRunner) -> Result<Vec<ServiceMetrics>> {
        let seeds: Vec<u64> = (0..cfg.eval_episodes as u64).map(|k| cfg.eval_seed(k)).collect();
        let traces = collect(runner.run_all(&seeds, &|s| self.rollout(scenario, s, cfg.eval_mode, derive_seed(s, 7), QUIET)))?;
        traces.iter().map(compute_metrics).collect()
    }
}

/// Train until `cfg.episodes`, calling `on_update` after every update.
pub fn train<F>(agent: &mut Agent, scenario: &Scenario, cfg: &TrainConfig, runner: &dyn RolloutRunner, mut on_update: F) -> Result<()>
where
    F: FnMut(&Agent, &CurvePoint) -> Result<()>,
{
    while agent.episode < cfg.episodes {
        let p = agent.train_iteration(scenario, cfg, runner)?;
        on_update(agent, &p)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::Window;
    use crate::diffnet::check_gradients;
    use crate::domain::ServiceRegion;
    use crate::mdp::{MdpStepRecord, RewardCounts};
    use crate::scenario::DemandSource;
    use crate::sim::SimConfig;
    use rand::Rng;

    fn graph(n: usize, width: usize, seed: u64) -> ZoneGraph {
        let mut rng = rng_from_seed(seed);
        let region = ServiceRegion::grid(1000.0 * n as f64, 1000.0, n, 1).unwrap();
        let tt = region.travel_time_matrix(5.0).unwrap();
        let features = Tensor2::from_vec(n, width, (0..n * width).map(|_| rng.gen_range(0..6) as f64).collect()).unwrap();
        ZoneGraph { n_zones: n, features, adjacency: Tensor2::from_rows(&tt).unwrap(), q: width - 3, forecast_horizon: 0 }
    }

    fn small_net(n: usize) -> NetConfig {
        NetConfig { hidden: 6, gcn_layers: 4, ..NetConfig::new(n, 7, 10) }
    }

    #[test]
    fn advantages_by_hand() {
        let (_, a) = returns_and_advantages(&[1.0, 2.0, 3.0], &[2.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(a[0], 4.0);
        let (_, a) = returns_and_advantages(&[1.0, 2.0, 3.0], &[0.0; 3], 0.5).unwrap();
        assert_eq!(a[0], 2.75);
        let (g, _) = returns_and_advantages(&[1.0, -2.0, 0.5], &[0.0; 3], 0.9).unwrap();
        let (_, a) = returns_and_advantages(&[1.0, -2.0, 0.5], &g, 0.9).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
        assert!(returns_and_advantages(&[1.0], &[], 0.9).is_err());
    }

    #[test]
    fn actor_output_shape_and_floor() {
        let actor = ActorNet::new(small_net(3), 1).unwrap();
        let c = actor.concentrations(&graph(3, 7, 2)).unwrap();
        assert_eq!(c.shape(), (3, 3));
        assert!(c.data.iter().all(|&v| v >= CONC_EPS));
        let critic = CriticNet::new(small_net(3), 1).unwrap();
        assert!(critic.value(&graph(3, 7, 2)).unwrap().is_finite());
    }

    #[test]
    fn wrong_width_is_rejected() {
        let actor = ActorNet::new(small_net(3), 1).unwrap();
        assert!(matches!(actor.concentrations(&graph(3, 8, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_mode_is_row_normalized_concentration() {
        let actor = ActorNet::new(small_net(3), 4).unwrap();
        let g = graph(3, 7, 5);
        let c = actor.concentrations(&g).unwrap();
        let (a, _) = act(&actor, &g, PolicyMode::Mean, &mut rng_from_seed(0)).unwrap();
        for i in 0..3 {
            let s: f64 = c.row(i).iter().sum();
            for j in 0..3 {
                assert!((a.rows[i][j] - c.get(i, j) / s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sampled_rows_sum_to_one_and_logpdf_adds_rows() {
        let actor = ActorNet::new(small_net(3), 4).unwrap();
        let g = graph(3, 7, 6);
        let mut rng = rng_from_seed(1);
        let c = actor.concentrations(&g).unwrap();
        for _ in 0..20 {
            let (a, lp) = act(&actor, &g, PolicyMode::Sample, &mut rng).unwrap();
            a.validate().unwrap();
            let rows: f64 = (0..3).map(|i| dirichlet::logpdf(c.row(i), &a.rows[i]).unwrap()).sum();
            assert!((rows - lp).abs() < 1e-9);
        }
    }

    #[test]
    fn actor_score_gradient_matches_finite_differences() {
        let mut actor = ActorNet::new(small_net(3), 9).unwrap();
        let g = graph(3, 7, 3);
        let (a, _) = act(&actor, &g, PolicyMode::Sample, &mut rng_from_seed(2)).unwrap();
        let points = a.to_tensor();
        let shell = actor.clone();
        let mut store = core::mem::take(&mut actor.store);
        let report = check_gradients(&mut store, 1e-6, |tape, s| {
            let conc = shell.concentrations_with(tape, s, &g)?;
            let lp = tape.dirichlet_logpdf(conc, &points)?;
            Ok(tape.scale(lp, -1.7))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        let mut critic = CriticNet::new(small_net(3), 9).unwrap();
        let g = graph(3, 7, 3);
        let shell = critic.clone();
        let mut store = core::mem::take(&mut critic.store);
        let report = check_gradients(&mut store, 1e-6, |tape, s| {
            let v = shell.value_with(tape, s, &g)?;
            let target = tape.constant(Tensor2::scalar(-2.5));
            let d = tape.sub(v, target)?;
            tape.mul(d, d)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    fn fake_trace(states: Vec<ZoneGraph>, actions: Vec<RepositionAction>, counts: Vec<RewardCounts>) -> EpisodeTrace {
        let region = ServiceRegion::grid(3000.0, 1000.0, 3, 1).unwrap();
        let mdp = states
            .into_iter()
            .zip(actions)
            .zip(counts)
            .enumerate()
            .map(|(t, ((s, a), c))| MdpStepRecord { time: t as f64 * 300.0, state: Some(s), action: a, log_prob: None, counts: c, dispatched: 0 })
            .collect();
        EpisodeTrace {
            version: 1,
            seed: 0,
            config: SimConfig { fleet_size: 10, ..SimConfig::default() },
            region,
            start: 0.0,
            horizon_end: 600.0,
            steps: 40,
            requests: vec![],
            vehicles: vec![],
            mdp,
            events: vec![],
            displacement: 0.0,
            tallies: EpisodeTallies::default(),
        }
    }

    #[test]
    fn zero_advantage_gives_zero_actor_gradient() {
        let net = small_net(3);
        let mut actor = ActorNet::new(net, 1).unwrap();
        let mut critic = CriticNet::new(net, 2).unwrap();
        let g = graph(3, 7, 1);
        // Critic predicts exactly the return: make the reward equal the current value.
        let v = critic.value(&g).unwrap();
        let weights = RewardWeights { omega: 1.0, sigma: 0.0 };
        let counts = RewardCounts { waiting: -v / 15.0, served: 0.0 };
        let (a, _) = act(&actor, &g, PolicyMode::Sample, &mut rng_from_seed(3)).unwrap();
        let batch = [fake_trace(vec![g], vec![a], vec![counts])];
        let cfg = TrainConfig::default();
        let mut ao = Adam::new(&actor.store, 1e-3);
        let mut co = Adam::new(&critic.store, 1e-3);
        let stats = update(&mut actor, &mut critic, &mut ao, &mut co, &batch, &cfg, weights).unwrap();
        assert!(stats.actor_grad_norm < 1e-9, "{}", stats.actor_grad_norm);
    }

    #[test]
    fn update_equals_score_function_with_unit_advantage() {
        // gamma = 1 and a critic pinned at zero make every advantage equal the return.
        let net = small_net(3);
        let mut actor = ActorNet::new(net, 1).unwrap();
        let mut critic = CriticNet::new(net, 2).unwrap();
        for v in critic.store.values.iter_mut() {
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let g = graph(3, 7, 1);
        let (a, _) = act(&actor, &g, PolicyMode::Sample, &mut rng_from_seed(3)).unwrap();
        let weights = RewardWeights { omega: 1.0, sigma: 0.0 };
        let counts = RewardCounts { waiting: -1.0 / 15.0, served: 0.0 };
        let batch = [fake_trace(vec![g.clone()], vec![a.clone()], vec![counts])];
        let cfg = TrainConfig { gamma: 1.0, ..TrainConfig::default() };
        let mut ao = Adam::new(&actor.store, 1e-3);
        let mut co = Adam::new(&critic.store, 1e-3);
        let before = actor.clone();
        update(&mut actor, &mut critic, &mut ao, &mut co, &batch, &cfg, weights).unwrap();
        // Gradient of -logpi by finite differences on the pre-update network.
        let points = a.to_tensor();
        let mut store = before.store.clone();
        let shell = before.clone();
        check_gradients(&mut store, 1e-6, |tape, s| {
            let conc = shell.concentrations_with(tape, s, &g)?;
            let lp = tape.dirichlet_logpdf(conc, &points)?;
            Ok(tape.scale(lp, -1.0))
        })
        .unwrap();
        for (got, want) in actor.store.grads.iter().zip(&store.grads) {
            for (x, y) in got.data.iter().zip(&want.data) {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn critic_overfits_frozen_batch() {
        let net = small_net(3);
        let mut actor = ActorNet::new(net, 1).unwrap();
        let mut critic = CriticNet::new(net, 2).unwrap();
        let states: Vec<ZoneGraph> = (0..4).map(|k| graph(3, 7, 10 + k)).collect();
        let actions = vec![RepositionAction::new(vec![vec![1.0 / 3.0; 3]; 3]).unwrap(); 4];
        let counts: Vec<RewardCounts> = [3.0, 0.0, 5.0, 1.0].iter().map(|&w| RewardCounts { waiting: w, served: 0.0 }).collect();
        let batch = [fake_trace(states, actions, counts)];
        let cfg = TrainConfig { actor_lr: 1e-12, critic_lr: 1e-3, ..TrainConfig::default() };
        let weights = RewardWeights { omega: 0.1, sigma: 0.9 };
        let mut ao = Adam::new(&actor.store, cfg.actor_lr);
        let mut co = Adam::new(&critic.store, cfg.critic_lr);
        let mut losses = Vec::new();
        for _ in 0..100 {
            losses.push(update(&mut actor, &mut critic, &mut ao, &mut co, &batch, &cfg, weights).unwrap().critic_loss);
        }
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
        assert!(losses[99] < 0.5 * losses[0], "{losses:?}");
    }

    fn one_zone() -> Scenario {
        Scenario {
            sim: SimConfig { fleet_size: 3, ..SimConfig::default() },
            region: ServiceRegion::grid(1500.0, 1500.0, 1, 1).unwrap(),
            window: Window::new(0.0, 1800.0).unwrap(),
            demand: DemandSource::Synthetic { rates: vec![20.0], od: vec![vec![1.0]] },
        }
    }

    #[test]
    fn single_zone_policy_matches_baseline() {
        let s = one_zone();
        let cfg = TrainConfig { episodes: 4, workers: 2, hidden: 4, ..TrainConfig::default() };
        let (weights, _) = calibrate(&s, &[1, 2], &SerialRunner).unwrap();
        let mut agent = Agent::new(&s, &cfg, weights).unwrap();
        train(&mut agent, &s, &cfg, &SerialRunner, |_, _| Ok(())).unwrap();
        for seed in [5, 6] {
            let trained = agent.rollout(&s, seed, PolicyMode::Mean, 0, QUIET).unwrap();
            let base = run_episode(s.world(seed).unwrap(), &mut NoRepositioning, seed, QUIET).unwrap();
            assert_eq!(compute_metrics(&trained).unwrap(), compute_metrics(&base).unwrap());
        }
    }

    #[test]
    fn training_is_reproducible() {
        let s = one_zone();
        let cfg = TrainConfig { episodes: 4, workers: 2, hidden: 4, eval_every: 1, eval_episodes: 2, ..TrainConfig::default() };
        let run = || {
            let (w, _) = calibrate(&s, &[1, 2], &SerialRunner).unwrap();
            let mut agent = Agent::new(&s, &cfg, w).unwrap();
            train(&mut agent, &s, &cfg, &SerialRunner, |_, _| Ok(())).unwrap();
            agent
        };
        let a = run();
        assert_eq!(a.curve.len(), 2);
        assert_eq!(a, run());
    }
}
