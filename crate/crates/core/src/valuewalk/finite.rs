use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{grad_with, Shape, Tape, Var};
use crate::linalg::{self, CsrMatrix};
use crate::mdp::{greedy_policy, Demonstration, FiniteMdp, RewardTable};
use crate::sampler::Evaluation;

/// How `log det(I - gamma P̄)` enters the Q-space prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetMode {
    /// Differentiated through the soft policy.
    Exact,
    /// Value from the greedy policy, cached per greedy policy, no gradient.
    #[default]
    Detached,
    Omitted,
}

/// What the sampler moves over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSpace {
    /// One Q-value per state-action pair; one reward per pair.
    #[default]
    StateAction,
    /// One value per state; the reward is a function of the state only.
    StateOnly,
}

/// Continuation policy inside the Bellman inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContinuationPolicy {
    /// `softmax(alpha_bar Q)`.
    #[default]
    Soft,
    /// Hard argmax, lowest index on ties. Not differentiable at switches.
    Greedy,
}

/// Independent normal prior on every reward entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub std: f64,
}

impl Default for NormalPrior {
    fn default() -> Self {
        NormalPrior { mean: 0.0, std: 10.0 }
    }
}

impl NormalPrior {
    pub fn log_density(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|x| {
                let z = (x - self.mean) / self.std;
                -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * PI).ln()
            })
            .sum()
    }

    pub(crate) fn on_tape(&self, t: &mut Tape, r: Var) -> Var {
        let n = t.shape(r).len();
        let mu = t.scalar(self.mean);
        let centred = t.sub(r, mu);
        let z = t.scale(centred, 1.0 / self.std);
        let ss = t.dot(z, z);
        let quad = t.scale(ss, -0.5);
        let c = t.scalar(-(n as f64) * (self.std.ln() + 0.5 * (2.0 * PI).ln()));
        t.add(quad, c)
    }
}

#[derive(Debug, Clone)]
pub struct FinitePosteriorSpec {
    pub mdp: FiniteMdp,
    pub demos: Demonstration,
    pub prior: NormalPrior,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub det_mode: DetMode,
    pub value_space: ValueSpace,
    pub policy: ContinuationPolicy,
    /// When set, only pairs flagged `true` get the prior on their reward;
    /// the others get it on their Q-value. State-action values only.
    pub prior_pairs: Option<Vec<bool>>,
}

impl FinitePosteriorSpec {
    pub fn new(mdp: FiniteMdp, demos: Demonstration) -> Self {
        FinitePosteriorSpec {
            mdp,
            demos,
            prior: NormalPrior::default(),
            alpha: 3.0,
            alpha_bar: 100.0,
            det_mode: DetMode::default(),
            value_space: ValueSpace::default(),
            policy: ContinuationPolicy::default(),
            prior_pairs: None,
        }
    }

    pub fn with_det_mode(mut self, mode: DetMode) -> Self {
        self.det_mode = mode;
        self
    }

    pub fn with_value_space(mut self, space: ValueSpace) -> Self {
        self.value_space = space;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_prior(mut self, prior: NormalPrior) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_policy(mut self, policy: ContinuationPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn dim(&self) -> usize {
        match self.value_space {
            ValueSpace::StateAction => self.mdp.n_pairs(),
            ValueSpace::StateOnly => self.mdp.n_states(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidModel(format!("alpha {} must be non-negative", self.alpha)));
        }
        if !(self.alpha_bar > 0.0) {
            return Err(Error::InvalidModel(format!("alpha_bar {} must be positive", self.alpha_bar)));
        }
        if !(self.prior.std > 0.0) {
            return Err(Error::InvalidModel(format!("prior std {} must be positive", self.prior.std)));
        }
        self.demos.validate(&self.mdp)
    }
}

/// Rows `softmax(alpha_bar Q(s, .))`, flattened like `q`.
pub fn policy_from_q(q: &[f64], n_actions: usize, alpha_bar: f64) -> Vec<f64> {
    assert!(alpha_bar > 0.0);
    q.chunks(n_actions).flat_map(|row| linalg::softmax(row, alpha_bar)).collect()
}

/// One-hot rows at the argmax.
pub fn greedy_policy_matrix(q: &[f64], n_actions: usize) -> Vec<f64> {
    greedy_policy(q, n_actions)
        .into_iter()
        .flat_map(|a| (0..n_actions).map(move |b| if a == b { 1.0 } else { 0.0 }))
        .collect()
}

/// `P̄(s,a; s',a') = p(s'|s,a) pi(a'|s')` as a sparse `|S||A| x |S||A|` matrix.
///
/// Rows of terminal states are empty: no value flows past the end of an episode.
pub fn joint_kernel(mdp: &FiniteMdp, policy: &[f64]) -> CsrMatrix {
    let na = mdp.n_actions();
    assert_eq!(policy.len(), mdp.n_pairs());
    let rows: Vec<Vec<(usize, f64)>> = (0..mdp.n_pairs())
        .map(|i| {
            let mut row = Vec::new();
            for (next, p) in mdp.continuation().row(i) {
                for a in 0..na {
                    let w = p * policy[next * na + a];
                    if w != 0.0 {
                        row.push((next * na + a, w));
                    }
                }
            }
            row
        })
        .collect();
    CsrMatrix::from_rows(mdp.n_pairs(), &rows)
}

/// `R = Q - gamma P̄ Q`.
pub fn reward_from_q(q: &[f64], pbar: &CsrMatrix, discount: f64, n_actions: usize) -> RewardTable {
    let pq = pbar.mul_vec(q);
    RewardTable::new(q.iter().zip(&pq).map(|(a, b)| a - discount * b).collect(), n_actions)
}

/// `log det(I - gamma P̄)` by dense LU.
pub fn log_det_term(pbar: &CsrMatrix, discount: f64) -> Result<f64> {
    let n = pbar.rows();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
        for (j, p) in pbar.row(i) {
            a[i * n + j] -= discount * p;
        }
    }
    linalg::log_det_positive(n, &a)
}

/// Boltzmann log-likelihood of the demonstrated actions. Transitions do not
/// enter: they carry no information about Q when the dynamics are known.
pub fn log_likelihood(q: &[f64], demos: &Demonstration, alpha: f64, n_actions: usize) -> f64 {
    demos
        .transitions
        .iter()
        .map(|t| {
            let row = &q[t.state * n_actions..(t.state + 1) * n_actions];
            let scaled: Vec<f64> = row.iter().map(|x| alpha * x).collect();
            scaled[t.action] - linalg::logsumexp(&scaled)
        })
        .sum()
}

/// Log posterior and reward at a single point, with a throwaway cache.
pub fn log_posterior_finite(theta: &[f64], spec: &FinitePosteriorSpec) -> Result<(f64, RewardTable)> {
    let post = FinitePosterior::new(spec.clone())?;
    let mut cache = DetCache::default();
    let e = post.evaluate(theta, &mut cache)?;
    Ok((e.logp, post.reward_table(e.aux.unwrap_or_default())))
}

/// Greedy-policy determinant values, one chain's worth.
#[derive(Debug, Default)]
pub struct DetCache {
    values: HashMap<Vec<u32>, f64>,
    pub hits: usize,
    pub misses: usize,
}

const DET_CACHE_CAP: usize = 4096;

/// Sparse recipe for a policy-dependent matrix `M`: entry `e` adds
/// `pi[pair[e]] * prob[e]` to flattened cell `cell[e]` of a `size x size`
/// matrix. Used for `I - gamma M` whose log determinant enters the prior.
#[derive(Debug, Clone)]
pub(crate) struct KernelEntries {
    pub pair: Arc<[usize]>,
    pub prob: Vec<f64>,
    pub cell: Vec<usize>,
    pub scatter: Arc<CsrMatrix>,
    pub size: usize,
}

impl KernelEntries {
    fn new(size: usize, entries: Vec<(usize, f64, usize)>) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); size * size];
        for (e, &(_, _, cell)) in entries.iter().enumerate() {
            rows[cell].push((e, 1.0));
        }
        KernelEntries {
            scatter: Arc::new(CsrMatrix::from_rows(entries.len(), &rows)),
            pair: entries.iter().map(|e| e.0).collect(),
            prob: entries.iter().map(|e| e.1).collect(),
            cell: entries.iter().map(|e| e.2).collect(),
            size,
        }
    }

    /// State-to-state kernel `P_pi(s, s') = sum_a pi(a|s) p(s'|s,a)`. By
    /// Sylvester's identity `det(I - gamma P_pi) = det(I - gamma P̄)`.
    fn state_kernel(mdp: &FiniteMdp) -> Self {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut entries = Vec::new();
        for i in 0..mdp.n_pairs() {
            for (next, p) in mdp.continuation().row(i) {
                entries.push((i, p, (i / na) * ns + next));
            }
        }
        Self::new(ns, entries)
    }

    /// `P̄` restricted to the pairs in `keep` (rows and columns).
    fn joint_subkernel(mdp: &FiniteMdp, keep: &[usize]) -> Self {
        let na = mdp.n_actions();
        let mut position = vec![usize::MAX; mdp.n_pairs()];
        for (k, &i) in keep.iter().enumerate() {
            position[i] = k;
        }
        let n = keep.len();
        let mut entries = Vec::new();
        for (k, &i) in keep.iter().enumerate() {
            for (next, p) in mdp.continuation().row(i) {
                for a in 0..na {
                    let j = position[next * na + a];
                    if j != usize::MAX {
                        entries.push((next * na + a, p, k * n + j));
                    }
                }
            }
        }
        Self::new(n, entries)
    }

    fn log_det_value(&self, policy: &[f64], gamma: f64) -> f64 {
        let n = self.size;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        for e in 0..self.prob.len() {
            a[self.cell[e]] -= gamma * policy[self.pair[e]] * self.prob[e];
        }
        linalg::log_det_positive(n, &a).unwrap_or(f64::NAN)
    }

    fn log_det_on_tape(&self, t: &mut Tape, policy: Var, gamma: f64) -> Var {
        let n = self.size;
        let pi_e = t.gather(policy, &self.pair);
        let probs = t.constant(self.prob.clone(), Shape::col(self.prob.len()));
        let weighted = t.mul(pi_e, probs);
        let flat = t.sparse_matvec(&self.scatter, weighted);
        let m = t.reshape(flat, Shape::new(n, n));
        let scaled = t.scale(m, gamma);
        let eye = t.constant(identity(n), Shape::new(n, n));
        let a = t.sub(eye, scaled);
        t.logdet(a)
    }
}

pub(crate) fn identity(n: usize) -> Vec<f64> {
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    eye
}

/// Precomputed pieces of a [`FinitePosteriorSpec`]; shared read-only by chains.
#[derive(Debug, Clone)]
pub struct FinitePosterior {
    spec: FinitePosteriorSpec,
    counts_sa: Vec<f64>,
    counts_s: Vec<f64>,
    kernel: KernelEntries,
    /// Pairs whose reward carries the prior, and the rest, when restricted.
    prior_split: Option<(Arc<[usize]>, Arc<[usize]>)>,
}

impl FinitePosterior {
    pub fn new(spec: FinitePosteriorSpec) -> Result<Self> {
        spec.validate()?;
        let mdp = &spec.mdp;
        let (counts_sa, counts_s) = demo_counts(mdp, &spec.demos);
        let (kernel, prior_split) = match &spec.prior_pairs {
            None => (KernelEntries::state_kernel(mdp), None),
            Some(mask) => {
                if spec.value_space != ValueSpace::StateAction || mask.len() != mdp.n_pairs() {
                    return Err(Error::InvalidModel(
                        "a restricted prior needs state-action values and one flag per pair".into(),
                    ));
                }
                let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                let rest: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
                (KernelEntries::joint_subkernel(mdp, &keep), Some((keep.into(), rest.into())))
            }
        };
        Ok(FinitePosterior { spec, counts_sa, counts_s, kernel, prior_split })
    }

    pub fn spec(&self) -> &FinitePosteriorSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Wraps a reward draw into a table with one entry per pair.
    pub fn reward_table(&self, r: Vec<f64>) -> RewardTable {
        let na = self.spec.mdp.n_actions();
        match self.spec.value_space {
            ValueSpace::StateAction => RewardTable::new(r, na),
            ValueSpace::StateOnly => RewardTable::from_state_rewards(&r, na),
        }
    }

    /// Log posterior, gradient and reward draw (as aux).
    pub fn evaluate(&self, theta: &[f64], cache: &mut DetCache) -> Result<Evaluation> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: theta.len() });
        }
        let gamma = self.spec.mdp.discount();
        let mut det_const = 0.0;
        let (logp, grad, r) = grad_with(theta, |t, x| {
            let cont = Continuation::Known(self.spec.mdp.continuation());
            let parts = bellman(t, x, &self.spec, &cont);
            let mut lp = match &self.prior_split {
                None => self.spec.prior.on_tape(t, parts.reward),
                Some((keep, rest)) => {
                    // pairs never seen in the data have no Bellman backup; their
                    // Q-value takes the reward prior directly
                    let r_obs = t.gather(parts.reward, keep);
                    let q_rest = t.gather(x, rest);
                    let a = self.spec.prior.on_tape(t, r_obs);
                    let b = self.spec.prior.on_tape(t, q_rest);
                    t.add(a, b)
                }
            };
            match self.spec.det_mode {
                DetMode::Omitted => {}
                DetMode::Exact => {
                    let ld = self.kernel.log_det_on_tape(t, parts.policy, gamma);
                    lp = t.add(lp, ld);
                }
                DetMode::Detached => {
                    det_const = self.cached_logdet(t.value(parts.greedy_scores), cache);
                }
            }
            let ll = likelihood_on_tape(t, parts.q, self.spec.alpha, &self.counts_sa, &self.counts_s);
            lp = t.add(lp, ll);
            (lp, t.value(parts.reward).to_vec())
        })?;
        if !det_const.is_finite() {
            return Err(Error::Singular("I - gamma P̄ under the greedy policy".into()));
        }
        Ok(Evaluation::new(logp + det_const, grad).with_aux(r))
    }

    /// Log posterior with a throwaway determinant cache.
    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(theta, &mut DetCache::default())?.logp)
    }

    /// Q-values per pair implied by `theta`.
    pub fn q_values(&self, theta: &[f64]) -> Vec<f64> {
        let mut t = Tape::new();
        let x = t.input(theta);
        let parts = bellman(&mut t, x, &self.spec, &Continuation::Known(self.spec.mdp.continuation()));
        t.value(parts.q).to_vec()
    }

    /// Reward implied by `theta`.
    pub fn reward(&self, theta: &[f64]) -> Vec<f64> {
        let mut t = Tape::new();
        let x = t.input(theta);
        let parts = bellman(&mut t, x, &self.spec, &Continuation::Known(self.spec.mdp.continuation()));
        t.value(parts.reward).to_vec()
    }

    fn cached_logdet(&self, scores: &[f64], cache: &mut DetCache) -> f64 {
        let na = self.spec.mdp.n_actions();
        let key: Vec<u32> = greedy_policy(scores, na).into_iter().map(|a| a as u32).collect();
        if let Some(v) = cache.values.get(&key) {
            cache.hits += 1;
            return *v;
        }
        cache.misses += 1;
        let onehot = greedy_policy_matrix(scores, na);
        let v = self.kernel.log_det_value(&onehot, self.spec.mdp.discount());
        if cache.values.len() >= DET_CACHE_CAP {
            cache.values.clear();
        }
        cache.values.insert(key, v);
        v
    }
}

pub(crate) fn demo_counts(mdp: &FiniteMdp, demos: &Demonstration) -> (Vec<f64>, Vec<f64>) {
    let na = mdp.n_actions();
    let mut counts_sa = vec![0.0; mdp.n_pairs()];
    let mut counts_s = vec![0.0; mdp.n_states()];
    for t in &demos.transitions {
        counts_sa[t.state * na + t.action] += 1.0;
        counts_s[t.state] += 1.0;
    }
    (counts_sa, counts_s)
}

/// Where the expected next-state value comes from.
pub(crate) enum Continuation<'a> {
    Known(&'a Arc<CsrMatrix>),
    /// `|S||A| x |S|` transition matrix on the tape, terminal rows zeroed.
    Learned(Var),
}

impl Continuation<'_> {
    fn apply(&self, t: &mut Tape, v: Var) -> Var {
        match self {
            Continuation::Known(m) => t.sparse_matvec(m, v),
            Continuation::Learned(p) => {
                let n = t.shape(v).len();
                let col = t.reshape(v, Shape::col(n));
                t.matmul(*p, col)
            }
        }
    }
}

pub(crate) struct BellmanParts {
    /// `|S| x |A|`
    pub q: Var,
    pub reward: Var,
    /// `|S| x |A|` continuation policy.
    pub policy: Var,
    /// Scores whose row argmax is the greedy policy.
    pub greedy_scores: Var,
}

/// Reward and Q-values implied by the sampled values `x`.
pub(crate) fn bellman(t: &mut Tape, x: Var, spec: &FinitePosteriorSpec, cont: &Continuation) -> BellmanParts {
    let (ns, na) = (spec.mdp.n_states(), spec.mdp.n_actions());
    let gamma = spec.mdp.discount();
    match spec.value_space {
        ValueSpace::StateAction => {
            let qmat = t.reshape(x, Shape::new(ns, na));
            let policy = policy_on_tape(t, qmat, spec.alpha_bar, spec.policy);
            let weighted = t.mul(policy, qmat);
            let v_next = t.row_sum(weighted);
            let future = cont.apply(t, v_next);
            let disc = t.scale(future, gamma);
            let flat = t.reshape(x, Shape::col(ns * na));
            let reward = t.sub(flat, disc);
            BellmanParts { q: qmat, reward, policy, greedy_scores: qmat }
        }
        ValueSpace::StateOnly => {
            // W(s,a) = sum_s' p(s'|s,a) V(s'), so Q(s,a) = R(s) + gamma W(s,a)
            let w = cont.apply(t, x);
            let wmat = t.reshape(w, Shape::new(ns, na));
            let policy = policy_on_tape(t, wmat, spec.alpha_bar * gamma, spec.policy);
            let weighted = t.mul(policy, wmat);
            let expected = t.row_sum(weighted);
            let disc = t.scale(expected, gamma);
            let reward = t.sub(x, disc);
            let gw = t.scale(wmat, gamma);
            let q = t.add(reward, gw);
            BellmanParts { q, reward, policy, greedy_scores: wmat }
        }
    }
}

pub(crate) fn policy_on_tape(t: &mut Tape, scores: Var, inv_temp: f64, kind: ContinuationPolicy) -> Var {
    let s = t.shape(scores);
    match kind {
        ContinuationPolicy::Soft if inv_temp > 0.0 => {
            let logits = t.scale(scores, inv_temp);
            t.softmax_rows(logits)
        }
        // zero discount: the continuation is irrelevant; any stochastic rows do
        ContinuationPolicy::Soft => t.constant(vec![1.0 / s.cols as f64; s.len()], s),
        ContinuationPolicy::Greedy => {
            let onehot = greedy_policy_matrix(t.value(scores), s.cols);
            t.constant(onehot, s)
        }
    }
}

pub(crate) fn likelihood_on_tape(t: &mut Tape, qmat: Var, alpha: f64, counts_sa: &[f64], counts_s: &[f64]) -> Var {
    if counts_s.iter().all(|c| *c == 0.0) {
        return t.scalar(0.0);
    }
    let aq = t.scale(qmat, alpha);
    let shape = t.shape(aq);
    let counts = t.constant(counts_sa.to_vec(), shape);
    let chosen = t.dot(aq, counts);
    let lse = t.row_logsumexp(aq);
    let ns = t.constant(counts_s.to_vec(), Shape::col(counts_s.len()));
    let norm = t.dot(lse, ns);
    t.sub(chosen, norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{boltzmann_expert_rollout, gridworld_by_size, value_iteration, Transition};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn no_demos() -> Demonstration {
        Demonstration::new("custom", 3.0, 0, Vec::new())
    }

    #[test]
    fn policy_examples() {
        let p = policy_from_q(&[1.0, 0.0], 2, 3.0);
        assert!((p[0] - 0.9526).abs() < 1e-4);
        assert!((p[0] - 3f64.exp() / (3f64.exp() + 1.0)).abs() < 1e-12);
        assert!(policy_from_q(&[2.0, 2.0, 2.0], 3, 5.0).iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let hard = policy_from_q(&[0.3, 0.31, 0.1], 3, 1e6);
        assert_eq!(hard, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn joint_kernel_shapes() {
        // uniform transitions on 2 states / 2 actions with a uniform policy
        let mdp = FiniteMdp::new(2, 2, vec![0.5; 8], 0.9, vec![false; 2], vec![0.5, 0.5]).unwrap();
        let k = joint_kernel(&mdp, &[0.5; 4]);
        assert!(k.to_dense().iter().all(|x| (*x - 0.25).abs() < 1e-15));

        let g = gridworld_by_size(3).unwrap();
        let q = value_iteration(&g.mdp, &g.reward, 1e-10);
        let pi = greedy_policy_matrix(&q, 4);
        let k = joint_kernel(&g.mdp, &pi);
        for i in 0..g.mdp.n_pairs() {
            let total: f64 = k.row(i).map(|(_, p)| p).sum();
            let s = i / 4;
            if g.mdp.is_terminal(s) {
                assert_eq!(total, 0.0);
            } else {
                assert_eq!(k.row(i).count(), 1);
                assert!((total - 1.0).abs() < 1e-15);
            }
        }
        // spot rows against p(s'|s,a) pi(a'|s')
        let dense = k.to_dense();
        let n = g.mdp.n_pairs();
        for &(s, a) in &[(0, 0), (0, 3), (3, 1), (4, 2), (8, 3)] {
            for s2 in 0..9 {
                for a2 in 0..4 {
                    let expect = g.mdp.prob(s, a, s2) * pi[s2 * 4 + a2];
                    assert_eq!(dense[(s * 4 + a) * n + s2 * 4 + a2], expect);
                }
            }
        }
    }

    #[test]
    fn reward_from_q_examples() {
        let mdp = FiniteMdp::new(1, 1, vec![1.0], 0.9, vec![false], vec![1.0]).unwrap();
        let k = joint_kernel(&mdp, &[1.0]);
        let r = reward_from_q(&[2.0], &k, 0.9, 1);
        assert!((r.values[0] - 2.0 * 0.1).abs() < 1e-15);
        assert_eq!(reward_from_q(&[2.0], &k, 0.0, 1).values, vec![2.0]);
    }

    #[test]
    fn value_iteration_round_trip() {
        let g = gridworld_by_size(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let r: Vec<f64> = (0..g.mdp.n_pairs()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let r = RewardTable::new(r, 4);
            let q = value_iteration(&g.mdp, &r, 1e-11);
            let k = joint_kernel(&g.mdp, &greedy_policy_matrix(&q, 4));
            let back = reward_from_q(&q, &k, g.mdp.discount(), 4);
            let err = back.values.iter().zip(&r.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn log_det_examples() {
        let eye = CsrMatrix::from_rows(4, &(0..4).map(|i| vec![(i, 1.0)]).collect::<Vec<_>>());
        assert!(approx(log_det_term(&eye, 0.9).unwrap(), 4.0 * 0.1f64.ln(), 1e-12));
        // 2x2 doubly stochastic with off-diagonal q: det = (1 - g(1-q))^2 - (g q)^2
        let q = 0.3;
        let g = 0.9;
        let m = CsrMatrix::from_dense(2, 2, &[1.0 - q, q, q, 1.0 - q]);
        let closed = ((1.0 - g * (1.0 - q)).powi(2) - (g * q).powi(2)).ln();
        assert!(approx(log_det_term(&m, g).unwrap(), closed, 1e-12));
    }

    #[test]
    fn state_kernel_determinant_matches_joint() {
        let g = gridworld_by_size(3).unwrap();
        let spec = FinitePosteriorSpec::new(g.mdp.clone(), no_demos()).with_det_mode(DetMode::Exact);
        let post = FinitePosterior::new(spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let x = t.input(&q);
        let parts = bellman(&mut t, x, post.spec(), &Continuation::Known(g.mdp.continuation()));
        let ld = post.kernel.log_det_on_tape(&mut t, parts.policy, 0.9);
        let pi = policy_from_q(&q, 4, 100.0);
        let joint = log_det_term(&joint_kernel(&g.mdp, &pi), 0.9).unwrap();
        assert!(approx(t.scalar_value(ld), joint, 1e-10));
    }

    #[test]
    fn likelihood_examples() {
        let demo = Demonstration::new("custom", 3.0, 0, vec![Transition { state: 0, action: 0, next_state: 0 }]);
        let ll = log_likelihood(&[1.0, 0.0], &demo, 3.0, 2);
        assert!((ll - (-0.04859)).abs() < 1e-5, "{ll}");
        assert!((log_likelihood(&[1.0, 0.0], &demo, 0.0, 2) - 0.5f64.ln()).abs() < 1e-15);
        let mut doubled = demo.clone();
        doubled.transitions.extend(demo.transitions.clone());
        assert_eq!(log_likelihood(&[1.0, 0.0], &doubled, 3.0, 2), 2.0 * ll);
    }

    proptest! {
        #[test]
        fn rationality_rescaling_is_invariant(q in prop::collection::vec(-5.0f64..5.0, 8), c in 0.1f64..10.0) {
            let demo = Demonstration::new("custom", 3.0, 0, vec![
                Transition { state: 0, action: 1, next_state: 1 },
                Transition { state: 1, action: 3, next_state: 0 },
            ]);
            let scaled: Vec<f64> = q.iter().map(|x| x / c).collect();
            let a = log_likelihood(&q, &demo, 3.0, 4);
            let b = log_likelihood(&scaled, &demo, 3.0 * c, 4);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn empty_posterior_is_prior() {
        let g = gridworld_by_size(3).unwrap();
        let mdp = g.mdp.with_discount(0.0).unwrap();
        let spec = FinitePosteriorSpec::new(mdp, no_demos()).with_det_mode(DetMode::Omitted);
        let q: Vec<f64> = (0..36).map(|i| i as f64 * 0.3 - 4.0).collect();
        let (lp, r) = log_posterior_finite(&q, &spec).unwrap();
        assert_eq!(r.values, q);
        assert!(approx(lp, spec.prior.log_density(&q), 1e-12));
    }

    #[test]
    fn true_q_beats_zero() {
        let g = gridworld_by_size(3).unwrap();
        let q_true = value_iteration(&g.mdp, &g.reward, 1e-10);
        let demos = boltzmann_expert_rollout(&g.mdp, &q_true, 3.0, 50, 2);
        let spec = FinitePosteriorSpec::new(g.mdp.clone(), demos);
        let (a, _) = log_posterior_finite(&q_true, &spec).unwrap();
        let (b, _) = log_posterior_finite(&vec![0.0; 36], &spec).unwrap();
        assert!(a > b, "{a} vs {b}");
    }

    #[test]
    fn state_only_reward_matches_state_action_expansion() {
        // V -> (R, Q) must satisfy R = (I - gamma P̄) Q with the same soft policy
        let g = gridworld_by_size(3).unwrap();
        let spec = FinitePosteriorSpec::new(g.mdp.clone(), no_demos()).with_value_space(ValueSpace::StateOnly);
        let post = FinitePosterior::new(spec).unwrap();
        let v: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let q = post.q_values(&v);
        let r = post.reward(&v);
        let pi = policy_from_q(&q, 4, 100.0);
        let back = reward_from_q(&q, &joint_kernel(&g.mdp, &pi), 0.9, 4);
        for s in 0..9 {
            for a in 0..4 {
                assert!((back.get(s, a) - r[s]).abs() < 1e-10);
            }
        }
    }

    fn fd_check(post: &FinitePosterior, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        for _ in 0..20 {
            let theta: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-scale..scale)).collect();
            let mut cache = DetCache::default();
            let e = post.evaluate(&theta, &mut cache).unwrap();
            for i in 0..theta.len() {
                let mut p = theta.clone();
                let mut m = theta.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (post.evaluate(&p, &mut cache).unwrap().logp - post.evaluate(&m, &mut cache).unwrap().logp)
                    / (2.0 * h);
                let rel = (fd - e.grad[i]).abs() / (1.0 + fd.abs().max(e.grad[i].abs()));
                assert!(rel < 1e-5, "coord {i}: fd {fd} vs {}", e.grad[i]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = gridworld_by_size(3).unwrap();
        let q_true = value_iteration(&g.mdp, &g.reward, 1e-10);
        let demos = boltzmann_expert_rollout(&g.mdp, &q_true, 3.0, 50, 2);
        for mode in [DetMode::Detached, DetMode::Omitted, DetMode::Exact] {
            for space in [ValueSpace::StateAction, ValueSpace::StateOnly] {
                let mut spec = FinitePosteriorSpec::new(g.mdp.clone(), demos.clone())
                    .with_det_mode(mode)
                    .with_value_space(space);
                // a softer policy keeps the exact determinant smooth at FD scale
                spec.alpha_bar = 2.0;
                fd_check(&FinitePosterior::new(spec).unwrap(), 7, 5.0);
            }
        }
    }

    #[test]
    fn detached_cache_hits() {
        let g = gridworld_by_size(3).unwrap();
        let post = FinitePosterior::new(FinitePosteriorSpec::new(g.mdp.clone(), no_demos())).unwrap();
        let mut cache = DetCache::default();
        let q = value_iteration(&g.mdp, &g.reward, 1e-10);
        let a = post.evaluate(&q, &mut cache).unwrap();
        let nudged: Vec<f64> = q.iter().map(|x| x + 1e-3).collect();
        post.evaluate(&nudged, &mut cache).unwrap();
        assert_eq!((cache.hits, cache.misses), (1, 1));
        // and the cached value is the greedy log det
        let k = joint_kernel(&g.mdp, &greedy_policy_matrix(&q, 4));
        let ld = log_det_term(&k, 0.9).unwrap();
        let omitted = FinitePosterior::new(
            FinitePosteriorSpec::new(g.mdp.clone(), no_demos()).with_det_mode(DetMode::Omitted),
        )
        .unwrap();
        let b = omitted.log_density(&q).unwrap();
        assert!(approx(a.logp - b, ld, 1e-10));
    }

    #[test]
    fn dimension_errors() {
        let g = gridworld_by_size(3).unwrap();
        let post = FinitePosterior::new(FinitePosteriorSpec::new(g.mdp, no_demos())).unwrap();
        assert!(matches!(post.log_density(&[0.0; 5]), Err(Error::Dimension { expected: 36, got: 5 })));
    }
}
