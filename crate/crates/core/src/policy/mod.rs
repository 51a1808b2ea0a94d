//! Policies turn an [`Observation`] into an action.
//!
//! Three backends share one handle type:
//! * a built-in linear softmax policy over hashed `(feature, candidate)`
//!   pairs, with exact log-probabilities and gradients;
//! * a remote policy speaking a small JSON request/response protocol;
//! * scripted rules (oracle, fixed index, fixed text) used as fixed
//!   sub-agents and in tests.

pub mod remote;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentId, Candidate, Observation};
use crate::text::fnv1a;

pub use remote::{MockBehavior, MockPolicyServer, RemotePolicy, RetryPolicy, TcpTransport, Transport};

/// Default number of hashed parameters per built-in policy.
pub const DEFAULT_POLICY_DIM: usize = 1 << 14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    /// Network-level failure; safe to retry.
    #[error("transport error: {0}")]
    Transport(String),
    /// The peer violated the protocol; never retried.
    #[error("protocol error: {message} (raw payload: {raw})")]
    Protocol { message: String, raw: String },
    #[error("action is outside the policy support for this observation")]
    OutsideSupport,
    #[error("observation offers no candidate actions")]
    EmptySupport,
    #[error("invalid temperature {0}")]
    InvalidTemperature(f64),
    #[error("gradient has dimension {got}, parameters have {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("{0}")]
    Unsupported(String),
}

impl PolicyError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, PolicyError::Transport(_))
    }
}

/// One sampled action with its sampling-time log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub text: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    BuiltinSoftmax,
    Remote,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain ascent: `theta += lr * g`.
    Sgd,
    /// Adam applied only to coordinates with a non-zero gradient.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub m: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn sgd() -> Self {
        Self { kind: OptimizerKind::Sgd, epsilon: 0.0, beta1: 0.0, beta2: 0.0, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn adam(epsilon: f64) -> Self {
        Self { kind: OptimizerKind::Adam, epsilon, beta1: 0.9, beta2: 0.999, steps: 0, m: Vec::new(), v: Vec::new() }
    }
}

/// Linear softmax policy over hashed features.
///
/// `logit(c) = sum of theta[h(f)]` for `f` in the candidate's feature set:
/// every observation feature crossed with the candidate key, plus the
/// candidate's own shared features. There is no bias term: an action with
/// no active features has logit 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub theta: Vec<f64>,
    pub optimizer: OptimizerState,
}

impl SoftmaxPolicy {
    pub fn new(dim: usize, optimizer: OptimizerState) -> Self {
        assert!(dim > 0, "policy dimension must be positive");
        Self { theta: vec![0.0; dim], optimizer }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Feature strings of one candidate under `obs`.
    pub fn candidate_features(obs: &Observation, c: &Candidate) -> Vec<String> {
        let mut out = Vec::with_capacity(obs.features.len() + c.features.len());
        out.extend(obs.features.iter().map(|f| format!("{f}|{}", c.key)));
        out.extend(c.features.iter().cloned());
        out
    }

    /// Hashed parameter indices of one candidate (with multiplicity).
    pub fn candidate_indices(&self, obs: &Observation, c: &Candidate) -> Vec<usize> {
        let dim = self.theta.len() as u64;
        Self::candidate_features(obs, c).iter().map(|f| (fnv1a(f.as_bytes()) % dim) as usize).collect()
    }

    pub fn logits(&self, obs: &Observation) -> Vec<f64> {
        obs.candidates
            .iter()
            .map(|c| self.candidate_indices(obs, c).iter().map(|&i| self.theta[i]).sum())
            .collect()
    }

    /// Adds `scale * d log pi(action | obs) / d theta` into `grad`.
    pub fn accumulate_logprob_gradient(
        &self,
        obs: &Observation,
        action: usize,
        temperature: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        let dist = ActionDistribution::new(obs.candidates.clone(), self.logits(obs), temperature)?;
        if action >= dist.support.len() {
            return Err(PolicyError::OutsideSupport);
        }
        let inv_t = if temperature.is_infinite() { 0.0 } else { 1.0 / temperature };
        for (c, p) in obs.candidates.iter().zip(dist.probs()) {
            for i in self.candidate_indices(obs, c) {
                grad[i] -= scale * inv_t * p;
            }
        }
        for i in self.candidate_indices(obs, &obs.candidates[action]) {
            grad[i] += scale * inv_t;
        }
        Ok(())
    }

    fn step(&mut self, gradient: &[f64], learning_rate: f64) {
        let opt = &mut self.optimizer;
        match opt.kind {
            OptimizerKind::Sgd => {
                for (t, g) in self.theta.iter_mut().zip(gradient) {
                    *t += learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                if gradient.iter().all(|g| *g == 0.0) {
                    return;
                }
                if opt.m.len() != self.theta.len() {
                    opt.m = vec![0.0; self.theta.len()];
                    opt.v = vec![0.0; self.theta.len()];
                }
                opt.steps += 1;
                let bc1 = 1.0 - opt.beta1.powi(opt.steps as i32);
                let bc2 = 1.0 - opt.beta2.powi(opt.steps as i32);
                for (i, &g) in gradient.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g;
                    opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g;
                    let m_hat = opt.m[i] / bc1;
                    let v_hat = opt.v[i] / bc2;
                    self.theta[i] += learning_rate * m_hat / (v_hat.sqrt() + opt.epsilon);
                }
            }
        }
    }
}

/// Candidate set with logits and a temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub support: Vec<Candidate>,
    pub logits: Vec<f64>,
    /// `0` means greedy (uniform over the arg-max set), `+inf` uniform.
    pub temperature: f64,
    log_probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(support: Vec<Candidate>, logits: Vec<f64>, temperature: f64) -> Result<Self, PolicyError> {
        if support.is_empty() {
            return Err(PolicyError::EmptySupport);
        }
        if temperature.is_nan() || temperature < 0.0 {
            return Err(PolicyError::InvalidTemperature(temperature));
        }
        let log_probs = log_softmax(&logits, temperature);
        Ok(Self { support, logits, temperature, log_probs })
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    /// Draws one candidate index from a uniform variate in `[0, 1)`.
    pub fn draw(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, lp) in self.log_probs.iter().enumerate() {
            let p = lp.exp();
            if p > 0.0 {
                last_positive = i;
                acc += p;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

/// `log softmax(logits / temperature)` with the greedy and uniform limits.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let n = logits.len();
    if n == 0 {
        return Vec::new();
    }
    if temperature.is_infinite() {
        return vec![-(n as f64).ln(); n];
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if temperature == 0.0 {
        let ties = logits.iter().filter(|&&l| l == max).count() as f64;
        return logits.iter().map(|&l| if l == max { -ties.ln() } else { f64::NEG_INFINITY }).collect();
    }
    let scaled: Vec<f64> = logits.iter().map(|l| (l - max) / temperature).collect();
    let lse = scaled.iter().map(|z| z.exp()).sum::<f64>().ln();
    scaled.iter().map(|z| z - lse).collect()
}

/// Fixed action rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedRule {
    /// The environment's reference action (falls back to the first candidate).
    Oracle,
    /// Always the candidate at this position (clamped to the last one).
    Index(usize),
    /// Always this literal text.
    Text(String),
    /// The n-th text on the agent's n-th turn in an episode; the last text repeats.
    Script(Vec<String>),
}

impl ScriptedRule {
    fn act(&self, obs: &Observation) -> Result<String, PolicyError> {
        let candidate = |i: usize| {
            obs.candidates.get(i.min(obs.candidates.len().saturating_sub(1))).map(|c| c.text.clone())
        };
        match self {
            ScriptedRule::Oracle => {
                let idx = obs
                    .hint
                    .as_ref()
                    .and_then(|key| obs.candidates.iter().position(|c| &c.key == key))
                    .unwrap_or(0);
                candidate(idx).ok_or(PolicyError::EmptySupport)
            }
            ScriptedRule::Index(i) => candidate(*i).ok_or(PolicyError::EmptySupport),
            ScriptedRule::Text(t) => Ok(t.clone()),
            ScriptedRule::Script(texts) => {
                let turn = obs.history.iter().filter(|h| h.agent == obs.agent).count();
                texts.get(turn).or(texts.last()).cloned().ok_or(PolicyError::EmptySupport)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Softmax(SoftmaxPolicy),
    Remote(RemotePolicy),
    Scripted(ScriptedRule),
}

/// A live, versioned policy.
#[derive(Debug, Clone)]
pub struct PolicyHandle {
    pub agent_id: AgentId,
    pub backend: Backend,
    /// Incremented on every successful [`PolicyHandle::apply_update`].
    pub version: u64,
}

/// Frozen copy of a handle, used as the behaviour policy of one step.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(PolicyHandle);

impl PolicySnapshot {
    pub fn handle(&self) -> &PolicyHandle {
        &self.0
    }
}

impl PolicyHandle {
    pub fn softmax(agent_id: impl Into<AgentId>, dim: usize, optimizer: OptimizerState) -> Self {
        Self { agent_id: agent_id.into(), backend: Backend::Softmax(SoftmaxPolicy::new(dim, optimizer)), version: 0 }
    }

    pub fn scripted(agent_id: impl Into<AgentId>, rule: ScriptedRule) -> Self {
        Self { agent_id: agent_id.into(), backend: Backend::Scripted(rule), version: 0 }
    }

    pub fn remote(agent_id: impl Into<AgentId>, remote: RemotePolicy) -> Self {
        Self { agent_id: agent_id.into(), backend: Backend::Remote(remote), version: 0 }
    }

    pub fn kind(&self) -> BackendKind {
        match self.backend {
            Backend::Softmax(_) => BackendKind::BuiltinSoftmax,
            Backend::Remote(_) => BackendKind::Remote,
            Backend::Scripted(_) => BackendKind::Scripted,
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self.backend, Backend::Scripted(_))
    }

    pub fn softmax_policy(&self) -> Option<&SoftmaxPolicy> {
        match &self.backend {
            Backend::Softmax(p) => Some(p),
            _ => None,
        }
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(self.clone())
    }

    /// Built-in action distribution for `obs`.
    pub fn distribution(&self, obs: &Observation, temperature: f64) -> Result<ActionDistribution, PolicyError> {
        match &self.backend {
            Backend::Softmax(p) => ActionDistribution::new(obs.candidates.clone(), p.logits(obs), temperature),
            _ => Err(PolicyError::Unsupported("only built-in policies expose a distribution".into())),
        }
    }

    /// `n` independent draws. Deterministic given `seed` for local backends.
    pub fn sample(
        &self,
        obs: &Observation,
        n: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<SampledAction>, PolicyError> {
        match &self.backend {
            Backend::Softmax(_) => {
                let dist = self.distribution(obs, temperature)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..n)
                    .map(|_| {
                        let i = dist.draw(rng.gen::<f64>());
                        SampledAction { text: dist.support[i].text.clone(), logprob: dist.log_probs()[i] }
                    })
                    .collect())
            }
            Backend::Scripted(rule) => {
                let text = rule.act(obs)?;
                Ok(vec![SampledAction { text, logprob: 0.0 }; n])
            }
            Backend::Remote(remote) => remote.sample(&self.agent_id, obs, n, temperature, Some(seed)),
        }
    }

    /// Log-probability of `action_text` under this policy.
    pub fn log_prob(&self, obs: &Observation, action_text: &str, temperature: f64) -> Result<f64, PolicyError> {
        match &self.backend {
            Backend::Softmax(_) => {
                let idx = obs.candidate_index(action_text).ok_or(PolicyError::OutsideSupport)?;
                Ok(self.distribution(obs, temperature)?.log_probs()[idx])
            }
            Backend::Scripted(rule) => {
                if rule.act(obs)? == action_text {
                    Ok(0.0)
                } else {
                    Err(PolicyError::OutsideSupport)
                }
            }
            Backend::Remote(_) => {
                Err(PolicyError::Unsupported("remote policies report log-probabilities only when sampling".into()))
            }
        }
    }

    /// Gradient-ascent step with global-norm clipping.
    pub fn apply_update(&mut self, gradient: &[f64], learning_rate: f64, max_grad_norm: f64) -> Result<(), PolicyError> {
        let policy = match &mut self.backend {
            Backend::Softmax(p) => p,
            Backend::Remote(_) => return Err(PolicyError::Unsupported("remote policies update via emitted batches".into())),
            Backend::Scripted(_) => return Err(PolicyError::Unsupported("scripted policies are not trainable".into())),
        };
        if gradient.len() != policy.dim() {
            return Err(PolicyError::DimensionMismatch { expected: policy.dim(), got: gradient.len() });
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(PolicyError::NonFiniteGradient);
        }
        let norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max_grad_norm && norm > 0.0 {
            let scale = max_grad_norm / norm;
            let clipped: Vec<f64> = gradient.iter().map(|g| g * scale).collect();
            policy.step(&clipped, learning_rate);
        } else {
            policy.step(gradient, learning_rate);
        }
        self.version += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs_with(keys: &[&str]) -> Observation {
        Observation {
            agent: "a".into(),
            query: "q".into(),
            history: vec![],
            recalled: vec![],
            features: vec!["tok:q".into()],
            tools: vec![],
            candidates: keys.iter().map(|k| Candidate::new(*k, format!("<answer>{k}</answer>"))).collect(),
            hint: None,
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let lp = log_softmax(&[2.0, 0.0], 1.0);
        assert!(close(lp[0].exp(), 0.8807970779778823, 1e-12));
        assert!(close(lp[1].exp(), 0.11920292202211755, 1e-12));
        let lp = log_softmax(&[1.0, 1.0, 2.0], 1.0);
        // ln(e^2 / (e + e + e^2)) = 1 - ln(2 + e)
        assert!(close(lp[2], 1.0 - (2.0 + std::f64::consts::E).ln(), 1e-12));
        assert!(close(lp[2], -0.551444713932051, 1e-12));
        let lp = log_softmax(&[2.0, 0.0], f64::INFINITY);
        assert_eq!(lp, vec![-(2f64.ln()); 2]);
        let lp = log_softmax(&[2.0, 0.0], 1e12);
        assert!(close(lp[0].exp(), 0.5, 1e-9));
        let lp = log_softmax(&[1.0, 3.0, 3.0], 0.0);
        assert_eq!(lp[0], f64::NEG_INFINITY);
        assert_eq!(lp[1], -(2f64.ln()));
    }

    #[test]
    fn fresh_policy_is_uniform() {
        let h = PolicyHandle::softmax("a", 64, OptimizerState::sgd());
        let obs = obs_with(&["x", "y", "z", "w"]);
        let lp = h.log_prob(&obs, "<answer>y</answer>", 1.0).unwrap();
        assert!(close(lp, 0.25f64.ln(), 1e-15));
        assert_eq!(lp, h.log_prob(&obs, "<answer>y</answer>", 1.0).unwrap());
        assert_eq!(h.log_prob(&obs, "nope", 1.0), Err(PolicyError::OutsideSupport));
    }

    #[test]
    fn sampled_logprob_matches_log_prob() {
        let mut h = PolicyHandle::softmax("a", 64, OptimizerState::sgd());
        if let Backend::Softmax(p) = &mut h.backend {
            for (i, t) in p.theta.iter_mut().enumerate() {
                *t = (i as f64 * 0.37).sin();
            }
        }
        let obs = obs_with(&["x", "y", "z"]);
        for s in h.sample(&obs, 20, 1.2, 5).unwrap() {
            assert!((s.logprob - h.log_prob(&obs, &s.text, 1.2).unwrap()).abs() <= 1e-12);
        }
        assert_eq!(h.sample(&obs, 5, 1.2, 9).unwrap(), h.sample(&obs, 5, 1.2, 9).unwrap());
    }

    #[test]
    fn update_examples() {
        let mut h = PolicyHandle::softmax("a", 4, OptimizerState::sgd());
        h.apply_update(&[0.0; 4], 1e-6, 1.0).unwrap();
        assert_eq!(h.version, 1);
        assert_eq!(h.softmax_policy().unwrap().theta, vec![0.0; 4]);
        let g = [0.1, -0.2, 0.3, 0.4];
        h.apply_update(&g, 1e-6, 1.0).unwrap();
        let theta = &h.softmax_policy().unwrap().theta;
        for (t, gi) in theta.iter().zip(g) {
            assert_eq!(*t, 0.0 + 1e-6 * gi);
        }
        let mut h = PolicyHandle::softmax("a", 2, OptimizerState::sgd());
        h.apply_update(&[6.0, 8.0], 1.0, 1.0).unwrap();
        let theta = &h.softmax_policy().unwrap().theta;
        assert!(close((theta[0] * theta[0] + theta[1] * theta[1]).sqrt(), 1.0, 1e-15));
        assert!(matches!(h.apply_update(&[1.0], 1.0, 1.0), Err(PolicyError::DimensionMismatch { .. })));
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut h = PolicyHandle::softmax("a", 3, OptimizerState::adam(1e-5));
        h.apply_update(&[1.0, 0.0, 0.0], 0.1, 10.0).unwrap();
        let before = h.softmax_policy().unwrap().theta.clone();
        assert!(before[0] > 0.0 && before[1] == 0.0);
        h.apply_update(&[0.0; 3], 0.1, 10.0).unwrap();
        assert_eq!(h.softmax_policy().unwrap().theta, before);
        assert_eq!(h.version, 2);
    }

    #[test]
    fn scripted_rules() {
        let mut obs = obs_with(&["x", "y"]);
        obs.hint = Some("y".into());
        let h = PolicyHandle::scripted("a", ScriptedRule::Oracle);
        assert_eq!(h.sample(&obs, 2, 1.0, 0).unwrap()[1].text, "<answer>y</answer>");
        let h = PolicyHandle::scripted("a", ScriptedRule::Index(7));
        assert_eq!(h.sample(&obs, 1, 1.0, 0).unwrap()[0].text, "<answer>y</answer>");
        let mut h = PolicyHandle::scripted("a", ScriptedRule::Text("hi".into()));
        assert_eq!(h.log_prob(&obs, "hi", 1.0), Ok(0.0));
        assert!(h.apply_update(&[], 1.0, 1.0).is_err());
    }
}
