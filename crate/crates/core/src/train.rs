//! Learning agents, replay, the training loop and checkpoints.
//!
//! Actor-critic agents keep an actor over `o_cv` and a critic with one
//! Q-value per phase. In asymmetric mode the critic reads the full
//! observation `o = o_cv ++ o_noncv`; in symmetric mode only `o_cv`. DQN
//! agents (and the PressLight variant) have a Q-network over `o_cv` plus a
//! target copy.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{pick_phase, ControllerDecision};
use crate::error::{Error, Result};
use crate::math;
use crate::metrics::{m_delay, RoundMetrics};
use crate::netmodel::{DemandSpec, IntersectionId, RoadNetwork};
use crate::neural::{adam_step, softmax, AdamState, Architecture, Gradients, MlpParams};
use crate::rng::{self, Stream, StreamRng};
use crate::sensing::{observe, reward, ObservationLayout};
use crate::simcore::{Controller, DecisionContext, LogConfig, SimConfig, Simulation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    CvlightAsym,
    CvlightSym,
    Dqn,
    Presslight,
}

impl AgentKind {
    pub fn is_actor_critic(self) -> bool {
        matches!(self, AgentKind::CvlightAsym | AgentKind::CvlightSym)
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::CvlightAsym => "cvlight-asym",
            AgentKind::CvlightSym => "cvlight-sym",
            AgentKind::Dqn => "dqn",
            AgentKind::Presslight => "presslight",
        }
    }

    pub fn layout(self, net: &RoadNetwork, node: IntersectionId) -> ObservationLayout {
        let n = net.intersection(node);
        match self {
            AgentKind::Presslight => ObservationLayout::presslight(n),
            _ => ObservationLayout::cvlight(n),
        }
    }

    pub fn critic_width(self, layout: &ObservationLayout) -> usize {
        match self {
            AgentKind::CvlightAsym => layout.full_width(),
            _ => layout.cv_width(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub entropy_beta: f64,
    /// Decisions between updates.
    pub train_interval: u32,
    /// DQN target refresh period (updates).
    pub target_refresh: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Updates over which epsilon anneals; 0 means half the schedule.
    pub eps_anneal_updates: u64,
    pub clip_norm: f64,
    /// Critic outputs are multiplied by this before use.
    pub value_scale: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.99,
            lr: 1e-4,
            batch_size: 128,
            buffer_capacity: 10_000,
            entropy_beta: 0.01,
            train_interval: 4,
            target_refresh: 200,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_updates: 0,
            clip_norm: 5.0,
            value_scale: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bad.push(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            bad.push(format!(
                "need 0 < batch_size <= buffer_capacity, got {} / {}",
                self.batch_size, self.buffer_capacity
            ));
        }
        if self.train_interval == 0 {
            bad.push(String::from("train_interval must be positive"));
        }
        if !(self.value_scale > 0.0) {
            bad.push(String::from("value_scale must be positive"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// `(o, a, r, o')` with full observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub o: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub o_next: Vec<f64>,
}

/// Bounded FIFO replay memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Experience>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 14)) }
    }

    pub fn push(&mut self, e: Experience) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Experience {
        &self.items[i]
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.gen_range(0..self.items.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<&Experience> {
        self.sample_indices(rng, n).into_iter().map(|i| &self.items[i]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Sample (or explore) and learn.
    Train,
    /// Greedy, no learning.
    Eval,
}

/// Result of [`AgentBundle::act`].
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub phase: usize,
    pub probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateLoss {
    pub critic: f64,
    /// Zero for value-based agents.
    pub actor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle {
    pub kind: AgentKind,
    pub layout: ObservationLayout,
    pub hp: Hyperparams,
    pub actor: Option<MlpParams>,
    pub actor_adam: Option<AdamState>,
    pub critic: MlpParams,
    pub critic_adam: AdamState,
    pub target: Option<MlpParams>,
    pub buffer: ReplayBuffer,
    /// Completed updates (critic + actor pairs for actor-critic agents).
    pub updates: u64,
    pub decisions: u64,
}

impl AgentBundle {
    pub fn new<R: Rng + ?Sized>(kind: AgentKind, layout: ObservationLayout, hp: Hyperparams, rng: &mut R) -> Self {
        let actions = layout.phases;
        let critic = MlpParams::init_he_uniform(&Architecture::two_hidden(kind.critic_width(&layout), actions), rng);
        let actor = kind
            .is_actor_critic()
            .then(|| MlpParams::init_he_uniform(&Architecture::two_hidden(layout.cv_width(), actions), rng));
        AgentBundle {
            kind,
            layout,
            hp,
            actor_adam: actor.as_ref().map(AdamState::new),
            actor,
            critic_adam: AdamState::new(&critic),
            target: (!kind.is_actor_critic()).then(|| critic.clone()),
            critic,
            buffer: ReplayBuffer::new(hp.buffer_capacity),
            updates: 0,
            decisions: 0,
        }
    }

    /// Agent for intersection `node` with weights drawn from `seed`.
    pub fn for_intersection(
        kind: AgentKind,
        net: &RoadNetwork,
        node: IntersectionId,
        hp: Hyperparams,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(rng::derive_seed(seed, node.0 as u64), Stream::Init);
        AgentBundle::new(kind, kind.layout(net, node), hp, &mut r)
    }

    pub fn actions(&self) -> usize {
        self.layout.phases
    }

    pub fn cv_slice<'o>(&self, o: &'o [f64]) -> &'o [f64] {
        &o[..self.layout.cv_width()]
    }

    pub fn critic_input<'o>(&self, o: &'o [f64]) -> &'o [f64] {
        match self.kind {
            AgentKind::CvlightAsym => o,
            _ => self.cv_slice(o),
        }
    }

    fn check_obs(&self, o: &[f64]) -> Result<()> {
        if o.len() != self.layout.full_width() {
            return Err(Error::Dimension {
                expected: self.layout.full_width(),
                found: o.len(),
                context: "observation",
            });
        }
        Ok(())
    }

    /// Action distribution over phases from `o_cv` (actor-critic agents).
    pub fn policy(&self, o: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(o)?;
        let actor = self.actor.as_ref().ok_or(Error::Config(String::from("agent has no actor")))?;
        Ok(softmax(&actor.predict(self.cv_slice(o))?))
    }

    /// Q-values of every phase.
    pub fn q_values(&self, o: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(o)?;
        let mut q = self.critic.predict(self.critic_input(o))?;
        q.iter_mut().for_each(|v| *v *= self.hp.value_scale);
        Ok(q)
    }

    /// Exploration rate after `self.updates` updates.
    pub fn epsilon(&self, schedule_updates: u64) -> f64 {
        let horizon = if self.hp.eps_anneal_updates > 0 { self.hp.eps_anneal_updates } else { schedule_updates / 2 };
        if horizon == 0 {
            return self.hp.eps_end;
        }
        let frac = (self.updates as f64 / horizon as f64).min(1.0);
        self.hp.eps_start + (self.hp.eps_end - self.hp.eps_start) * frac
    }

    /// Chooses a phase. A forced switch takes the best phase other than the
    /// current one.
    pub fn act<R: Rng + ?Sized>(
        &self,
        o: &[f64],
        rng: &mut R,
        forced: bool,
        current: usize,
        mode: Mode,
        epsilon: f64,
    ) -> Result<Action> {
        let n = self.actions();
        if self.kind.is_actor_critic() {
            let pi = self.policy(o)?;
            let phase = if forced && n > 1 {
                pick_phase(&pi, current, true)
            } else {
                match mode {
                    Mode::Eval => math::argmax(&pi),
                    Mode::Train => sample_categorical(&pi, rng),
                }
            };
            Ok(Action { phase, probs: Some(pi) })
        } else {
            let q = self.q_values(o)?;
            let explore = mode == Mode::Train && rng.gen::<f64>() < epsilon;
            let phase = if explore {
                if forced && n > 1 {
                    let k = rng.gen_range(0..n - 1);
                    if k >= current {
                        k + 1
                    } else {
                        k
                    }
                } else {
                    rng.gen_range(0..n)
                }
            } else if forced && n > 1 {
                pick_phase(&q, current, true)
            } else {
                math::argmax(&q)
            };
            Ok(Action { phase, probs: None })
        }
    }

    fn stack(&self, batch: &[&Experience], next: bool, critic: bool) -> Vec<f64> {
        let mut x = Vec::new();
        for e in batch {
            let o = if next { &e.o_next } else { &e.o };
            x.extend_from_slice(if critic { self.critic_input(o) } else { self.cv_slice(o) });
        }
        x
    }

    /// TD targets `r + gamma * max_a' Q(o', a')` from `net`.
    fn td_targets(&self, net: &MlpParams, batch: &[&Experience]) -> Result<Vec<f64>> {
        let b = batch.len();
        let (q_next, _) = net.forward_batch(&self.stack(batch, true, true), b)?;
        let a = self.actions();
        Ok((0..b)
            .map(|i| {
                let row = &q_next[i * a..(i + 1) * a];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                batch[i].r + self.hp.gamma * m * self.hp.value_scale
            })
            .collect())
    }

    /// Gradient of the mean squared TD error with respect to the critic.
    pub fn critic_gradients(&self, batch: &[&Experience], targets: &[f64]) -> Result<(Gradients, f64)> {
        let b = batch.len();
        let a = self.actions();
        let c = self.hp.value_scale;
        let (q, cache) = self.critic.forward_batch(&self.stack(batch, false, true), b)?;
        let mut g = vec![0.0; b * a];
        let mut loss = 0.0;
        for i in 0..b {
            let act = batch[i].a;
            let err = c * q[i * a + act] - targets[i];
            loss += err * err;
            g[i * a + act] = 2.0 * err * c / b as f64;
        }
        let grads = self.critic.backward_params(&cache, &g)?;
        Ok((grads, loss / b as f64))
    }

    /// One semi-gradient TD step on the critic; returns the loss.
    pub fn critic_update(&mut self, batch: &[&Experience]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        self.check_batch(batch)?;
        let net = match (&self.target, self.kind.is_actor_critic()) {
            (Some(t), false) => t,
            _ => &self.critic,
        };
        let targets = self.td_targets(net, batch)?;
        let (mut grads, loss) = self.critic_gradients(batch, &targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("critic loss"));
        }
        grads.clip_global_norm(self.hp.clip_norm);
        adam_step(&mut self.critic, &grads, &mut self.critic_adam, self.hp.lr)?;
        Ok(loss)
    }

    /// Advantages `Q(o, a) - sum_k pi_k Q(o, k)` of the taken actions.
    pub fn advantages(&self, batch: &[&Experience]) -> Result<Vec<f64>> {
        let actor = self.actor.as_ref().ok_or(Error::Config(String::from("agent has no actor")))?;
        let b = batch.len();
        let a = self.actions();
        let c = self.hp.value_scale;
        let q = self.critic.forward_batch(&self.stack(batch, false, true), b)?.0;
        let logits = actor.forward_batch(&self.stack(batch, false, false), b)?.0;
        Ok((0..b)
            .map(|i| {
                let pi = softmax(&logits[i * a..(i + 1) * a]);
                let qrow = &q[i * a..(i + 1) * a];
                let v: f64 = pi.iter().zip(qrow).map(|(p, q)| p * q * c).sum();
                c * qrow[batch[i].a] - v
            })
            .collect())
    }

    /// Actor gradient of `-mean(log pi(a) * A) - beta * mean(H)` for fixed
    /// advantages; returns gradients and the loss. Only the `o_cv` slice of
    /// each experience is read.
    pub fn actor_gradients_with(&self, batch: &[&Experience], adv: &[f64]) -> Result<(Gradients, f64)> {
        let actor = self.actor.as_ref().ok_or(Error::Config(String::from("agent has no actor")))?;
        let b = batch.len();
        if adv.len() != b {
            return Err(Error::Dimension { expected: b, found: adv.len(), context: "advantages" });
        }
        let a = self.actions();
        let (logits, cache) = actor.forward_batch(&self.stack(batch, false, false), b)?;
        let beta = self.hp.entropy_beta;
        let mut g = vec![0.0; b * a];
        let mut loss = 0.0;
        for i in 0..b {
            let pi = softmax(&logits[i * a..(i + 1) * a]);
            let act = batch[i].a;
            let ai = adv[i];
            let logp: Vec<f64> = pi.iter().map(|&p| math::ln(p.max(f64::MIN_POSITIVE))).collect();
            let h: f64 = -pi.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
            loss += -logp[act] * ai - beta * h;
            for k in 0..a {
                let onehot = if k == act { 1.0 } else { 0.0 };
                g[i * a + k] = (ai * (pi[k] - onehot) + beta * pi[k] * (logp[k] + h)) / b as f64;
            }
        }
        let grads = actor.backward_params(&cache, &g)?;
        Ok((grads, loss / b as f64))
    }

    /// Advantages from the current critic, then [`actor_gradients_with`];
    /// returns gradients, advantages and the loss.
    ///
    /// [`actor_gradients_with`]: Self::actor_gradients_with
    pub fn actor_gradients(&self, batch: &[&Experience]) -> Result<(Gradients, Vec<f64>, f64)> {
        let adv = self.advantages(batch)?;
        let (g, loss) = self.actor_gradients_with(batch, &adv)?;
        Ok((g, adv, loss))
    }

    pub fn actor_update(&mut self, batch: &[&Experience]) -> Result<f64> {
        if batch.is_empty() || !self.kind.is_actor_critic() {
            return Ok(0.0);
        }
        self.check_batch(batch)?;
        let (mut grads, _, loss) = self.actor_gradients(batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("actor loss"));
        }
        grads.clip_global_norm(self.hp.clip_norm);
        let actor = self.actor.as_mut().expect("actor-critic agent");
        adam_step(actor, &grads, self.actor_adam.as_mut().expect("actor optimizer"), self.hp.lr)?;
        Ok(loss)
    }

    fn check_batch(&self, batch: &[&Experience]) -> Result<()> {
        let w = self.layout.full_width();
        for e in batch {
            if e.o.len() != w || e.o_next.len() != w {
                return Err(Error::Dimension {
                    expected: w,
                    found: e.o.len().max(e.o_next.len()),
                    context: "experience",
                });
            }
            if e.a >= self.actions() {
                return Err(Error::InvalidPhase { intersection: usize::MAX, phase: e.a, phases: self.actions() });
            }
        }
        Ok(())
    }

    /// Samples a batch and performs one update (critic then actor, or one
    /// DQN step). Returns `None` while the buffer is smaller than a batch.
    pub fn train_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<UpdateLoss>> {
        if self.buffer.len() < self.hp.batch_size {
            return Ok(None);
        }
        let idx = self.buffer.sample_indices(rng, self.hp.batch_size);
        let batch: Vec<Experience> = idx.iter().map(|&i| self.buffer.get(i).clone()).collect();
        let refs: Vec<&Experience> = batch.iter().collect();
        let critic = self.critic_update(&refs)?;
        let actor = self.actor_update(&refs)?;
        self.updates += 1;
        if !self.kind.is_actor_critic() && self.hp.target_refresh > 0 && self.updates % self.hp.target_refresh == 0 {
            self.target = Some(self.critic.clone());
        }
        Ok(Some(UpdateLoss { critic, actor }))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: String::from(CHECKPOINT_FORMAT),
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            layout: self.layout,
            layout_fingerprint: self.layout.fingerprint(),
            hyperparams: self.hp,
            actor: self.actor.clone(),
            actor_adam: self.actor_adam.clone(),
            critic: self.critic.clone(),
            critic_adam: self.critic_adam.clone(),
            target: self.target.clone(),
            updates: self.updates,
        }
    }

    /// Rebuilds an agent (with an empty replay buffer) from a checkpoint
    /// whose layout must match `expected`.
    pub fn from_checkpoint(ck: &Checkpoint, expected: &ObservationLayout) -> Result<Self> {
        ck.check(expected)?;
        Ok(AgentBundle {
            kind: ck.kind,
            layout: ck.layout,
            hp: ck.hyperparams,
            actor: ck.actor.clone(),
            actor_adam: ck.actor_adam.clone(),
            critic: ck.critic.clone(),
            critic_adam: ck.critic_adam.clone(),
            target: ck.target.clone(),
            buffer: ReplayBuffer::new(ck.hyperparams.buffer_capacity),
            updates: ck.updates,
            decisions: 0,
        })
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

pub const CHECKPOINT_FORMAT: &str = "cvlight-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable agent state (replay buffer excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: AgentKind,
    pub layout: ObservationLayout,
    pub layout_fingerprint: u64,
    pub hyperparams: Hyperparams,
    pub actor: Option<MlpParams>,
    pub actor_adam: Option<AdamState>,
    pub critic: MlpParams,
    pub critic_adam: AdamState,
    pub target: Option<MlpParams>,
    pub updates: u64,
}

impl Checkpoint {
    pub fn check(&self, expected: &ObservationLayout) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        if self.layout.fingerprint() != self.layout_fingerprint {
            return Err(Error::LayoutMismatch { expected: self.layout_fingerprint, found: self.layout.fingerprint() });
        }
        if self.layout_fingerprint != expected.fingerprint() {
            return Err(Error::LayoutMismatch { expected: expected.fingerprint(), found: self.layout_fingerprint });
        }
        let widths_ok = self.critic.input_dim() == self.kind.critic_width(&self.layout)
            && self.critic.output_dim() == self.layout.phases
            && self.actor.as_ref().is_none_or(|a| a.input_dim() == self.layout.cv_width());
        if !widths_ok {
            return Err(Error::Config(String::from("checkpoint network shapes disagree with its layout")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Controllers around agents
// ---------------------------------------------------------------------------

/// Greedy evaluation controller; only `o_cv` reaches the decision.
pub struct PolicyController<'a> {
    pub agent: &'a AgentBundle,
}

impl Controller for PolicyController<'_> {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Result<ControllerDecision> {
        let o = observe(ctx.sim, ctx.intersection, &self.agent.layout).full();
        // Eval mode never draws from the generator.
        let mut unused = rng::from_seed(0);
        let a = self.agent.act(&o, &mut unused, ctx.forced, ctx.signal().phase, Mode::Eval, 0.0)?;
        let mut d = ControllerDecision::new(ctx.intersection, a.phase, ctx.sim.clock);
        d.probs = a.probs;
        Ok(d)
    }
}

/// Per-agent bookkeeping while training.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pending: Option<(Vec<f64>, usize)>,
    since_update: u32,
    policy_rng: StreamRng,
    replay_rng: StreamRng,
    /// Stop updating once this many updates are done.
    pub update_cap: u64,
    /// Used for the epsilon schedule.
    pub schedule_updates: u64,
    loss_sum: UpdateLoss,
    loss_count: u64,
}

impl LearnerState {
    pub fn new(seed: u64, agent_index: usize, schedule_updates: u64) -> Self {
        let s = rng::derive_seed(seed, agent_index as u64);
        LearnerState {
            pending: None,
            since_update: 0,
            policy_rng: rng::stream(s, Stream::Policy),
            replay_rng: rng::stream(s, Stream::Replay),
            update_cap: schedule_updates,
            schedule_updates,
            loss_sum: UpdateLoss::default(),
            loss_count: 0,
        }
    }

    /// Drops the unfinished transition at the end of a round.
    pub fn end_round(&mut self) {
        self.pending = None;
    }

    /// Mean losses since the last call.
    pub fn take_losses(&mut self) -> Option<UpdateLoss> {
        if self.loss_count == 0 {
            return None;
        }
        let n = self.loss_count as f64;
        let l = UpdateLoss { critic: self.loss_sum.critic / n, actor: self.loss_sum.actor / n };
        self.loss_sum = UpdateLoss::default();
        self.loss_count = 0;
        Some(l)
    }
}

/// Collects experience at each decision and trains every `train_interval`
/// decisions.
pub struct TrainingController<'a> {
    pub agent: &'a mut AgentBundle,
    pub state: &'a mut LearnerState,
}

impl Controller for TrainingController<'_> {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Result<ControllerDecision> {
        let agent = &mut *self.agent;
        let st = &mut *self.state;
        let o = observe(ctx.sim, ctx.intersection, &agent.layout).full();
        if let Some((po, pa)) = st.pending.take() {
            let r = reward(ctx.sim, ctx.intersection);
            agent.buffer.push(Experience { o: po, a: pa, r, o_next: o.clone() });
        }
        let eps = agent.epsilon(st.schedule_updates);
        let a = agent.act(&o, &mut st.policy_rng, ctx.forced, ctx.signal().phase, Mode::Train, eps)?;
        st.pending = Some((o, a.phase));
        agent.decisions += 1;
        st.since_update += 1;
        if st.since_update >= agent.hp.train_interval && agent.updates < st.update_cap {
            if let Some(l) = agent.train_step(&mut st.replay_rng)? {
                st.since_update = 0;
                st.loss_sum.critic += l.critic;
                st.loss_sum.actor += l.actor;
                st.loss_count += 1;
            }
        }
        let mut d = ControllerDecision::new(ctx.intersection, a.phase, ctx.sim.clock);
        d.probs = a.probs;
        Ok(d)
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TrainScenario<'a> {
    pub net: &'a RoadNetwork,
    pub train_demand: &'a DemandSpec,
    pub eval_demand: &'a DemandSpec,
    pub round_length: u32,
    pub seed: u64,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub updates: u64,
    pub eval_every: u64,
    pub eval_rounds: usize,
    /// Safety stop on the number of training rounds.
    pub max_rounds: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule { updates: 6000, eval_every: 1000, eval_rounds: 4, max_rounds: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Minimum update count over agents.
    pub update: u64,
    pub round: u64,
    pub clock: u32,
    /// Mean losses per agent since the previous record (`None` if no update).
    pub losses: Vec<Option<UpdateLoss>>,
    pub eval_m_delay: Option<f64>,
}

/// Greedy evaluation rounds with seeds `derive_seed(seed, k)`.
pub fn evaluate(
    net: &RoadNetwork,
    demand: &DemandSpec,
    agents: &[AgentBundle],
    round_length: u32,
    rounds: usize,
    seed: u64,
) -> Result<Vec<RoundMetrics>> {
    (0..rounds)
        .map(|k| {
            let s = rng::derive_seed(seed, k as u64);
            let mut ctls: Vec<PolicyController<'_>> = agents.iter().map(|a| PolicyController { agent: a }).collect();
            let mut refs: Vec<&mut dyn Controller> = ctls.iter_mut().map(|c| c as &mut dyn Controller).collect();
            let mut sim = Simulation::with_config(net, demand, s, SimConfig::default(), LogConfig::METRICS);
            for _ in 0..round_length {
                sim.step(&mut refs)?;
            }
            let log = sim.into_log();
            Ok(m_delay(&log, net).with_seed(s))
        })
        .collect()
}

fn mean_delay(rounds: &[RoundMetrics]) -> f64 {
    if rounds.is_empty() {
        return 0.0;
    }
    rounds.iter().map(|r| r.m_delay).sum::<f64>() / rounds.len() as f64
}

/// Returned by the training callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Trains every agent in place. `on_record` sees each evaluation record
/// together with the agents at that moment and may stop training early.
pub fn train_loop(
    scn: &TrainScenario<'_>,
    agents: &mut [AgentBundle],
    sched: &TrainSchedule,
    on_record: &mut dyn FnMut(&TrainRecord, &[AgentBundle]) -> Result<Flow>,
) -> Result<Vec<TrainRecord>> {
    if agents.len() != scn.net.intersections.len() {
        return Err(Error::Dimension {
            expected: scn.net.intersections.len(),
            found: agents.len(),
            context: "agents per intersection",
        });
    }
    for a in agents.iter() {
        a.hp.validate()?;
    }
    let base: Vec<u64> = agents.iter().map(|a| a.updates).collect();
    let mut states: Vec<LearnerState> = (0..agents.len())
        .map(|i| {
            let mut s = LearnerState::new(scn.seed, i, sched.updates);
            s.update_cap = base[i] + sched.updates;
            s
        })
        .collect();
    let progress = |agents: &[AgentBundle]| agents.iter().zip(&base).map(|(a, b)| a.updates - b).min().unwrap_or(0);

    let mut records = Vec::new();
    let mut emit = |agents: &[AgentBundle], states: &mut [LearnerState], round: u64, clock: u32| -> Result<Flow> {
        let rounds = evaluate(scn.net, scn.eval_demand, agents, scn.round_length, sched.eval_rounds, scn.eval_seed)?;
        let rec = TrainRecord {
            update: progress(agents),
            round,
            clock,
            losses: states.iter_mut().map(|s| s.take_losses()).collect(),
            eval_m_delay: Some(mean_delay(&rounds)),
        };
        let flow = on_record(&rec, agents)?;
        records.push(rec);
        Ok(flow)
    };

    if emit(agents, &mut states, 0, 0)? == Flow::Stop || sched.updates == 0 {
        return Ok(records);
    }
    let every = sched.eval_every.max(1);
    let mut next_eval = every;
    let mut last_eval = 0;
    let mut round = 0u64;
    'rounds: while round < sched.max_rounds {
        let seed = rng::derive_seed(scn.seed, round);
        let mut sim = Simulation::with_config(scn.net, scn.train_demand, seed, SimConfig::default(), LogConfig::NONE);
        for _ in 0..scn.round_length {
            {
                let mut ctls: Vec<TrainingController<'_>> = agents
                    .iter_mut()
                    .zip(states.iter_mut())
                    .map(|(agent, state)| TrainingController { agent, state })
                    .collect();
                let mut refs: Vec<&mut dyn Controller> = ctls.iter_mut().map(|c| c as &mut dyn Controller).collect();
                sim.step(&mut refs)?;
            }
            let p = progress(agents);
            while next_eval <= sched.updates && p >= next_eval {
                let flow = emit(agents, &mut states, round, sim.clock)?;
                last_eval = next_eval;
                next_eval += every;
                if flow == Flow::Stop {
                    return Ok(records);
                }
            }
            if p >= sched.updates {
                break 'rounds;
            }
        }
        states.iter_mut().for_each(LearnerState::end_round);
        round += 1;
    }
    if progress(agents) < sched.updates {
        return Err(Error::Config(format!(
            "training stopped after {} rounds with {} of {} updates",
            sched.max_rounds,
            progress(agents),
            sched.updates
        )));
    }
    if last_eval < sched.updates {
        emit(agents, &mut states, round, 0)?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_grid, GridSpec};

    fn agent(kind: AgentKind, seed: u64) -> AgentBundle {
        let net = build_grid(&GridSpec::new(1, 1)).unwrap();
        AgentBundle::for_intersection(kind, &net, IntersectionId(0), Hyperparams::default(), seed)
    }

    #[test]
    fn widths_follow_mode() {
        let a = agent(AgentKind::CvlightAsym, 1);
        assert_eq!(a.critic.input_dim(), 83);
        assert_eq!(a.actor.as_ref().unwrap().input_dim(), 43);
        assert_eq!(a.critic.layers[0].fan_out, 166);
        let s = agent(AgentKind::CvlightSym, 1);
        assert_eq!(s.critic.input_dim(), 43);
        let p = agent(AgentKind::Presslight, 1);
        assert_eq!(p.critic.input_dim(), 34);
        assert!(p.actor.is_none() && p.target.is_some());
    }

    #[test]
    fn forced_switch_picks_other_phase() {
        let a = agent(AgentKind::CvlightAsym, 2);
        let o = vec![0.0; a.layout.full_width()];
        let mut r = rng::from_seed(0);
        for cur in 0..2 {
            let act = a.act(&o, &mut r, true, cur, Mode::Train, 0.0).unwrap();
            assert_ne!(act.phase, cur);
        }
    }

    #[test]
    fn replay_is_bounded_fifo() {
        let mut b = ReplayBuffer::new(3);
        for k in 0..5 {
            b.push(Experience { o: vec![], a: k, r: 0.0, o_next: vec![] });
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.get(0).a, 2);
        assert_eq!(b.get(2).a, 4);
    }

    #[test]
    fn epsilon_anneals_over_half_schedule() {
        let mut a = agent(AgentKind::Dqn, 3);
        assert_eq!(a.epsilon(1000), 1.0);
        a.updates = 250;
        assert!((a.epsilon(1000) - 0.525).abs() < 1e-12);
        a.updates = 900;
        assert!((a.epsilon(1000) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut a = agent(AgentKind::CvlightAsym, 4);
        let before = a.clone();
        assert_eq!(a.critic_update(&[]).unwrap(), 0.0);
        assert_eq!(a.actor_update(&[]).unwrap(), 0.0);
        assert_eq!(a, before);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let a = agent(AgentKind::CvlightAsym, 5);
        let ck = a.to_checkpoint();
        let b = AgentBundle::from_checkpoint(&ck, &a.layout).unwrap();
        assert_eq!(a.critic, b.critic);
        assert_eq!(a.actor, b.actor);
        let other = agent(AgentKind::Presslight, 5).layout;
        assert!(matches!(AgentBundle::from_checkpoint(&ck, &other), Err(Error::LayoutMismatch { .. })));
    }
}
