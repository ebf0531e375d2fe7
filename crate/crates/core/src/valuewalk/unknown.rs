use std::f64::consts::PI;
use std::sync::Arc;

use statrs::function::gamma::ln_gamma;

use super::finite::{
    bellman, demo_counts, greedy_policy_matrix, identity, likelihood_on_tape, Continuation, DetMode,
    FinitePosteriorSpec, ValueSpace,
};
use crate::error::{Error, Result};
use crate::grad::{grad_with, Shape, Tape, Var};
use crate::linalg::{self, CsrMatrix};
use crate::mdp::{Demonstration, FiniteMdp};
use crate::sampler::Evaluation;

/// Joint posterior over values and transition logits.
///
/// The structure (sizes, terminal states, discount) comes from
/// `base.mdp`; its transition probabilities are ignored. Each row of
/// `|S|` logits maps to a transition distribution by softmax and gets a
/// symmetric Dirichlet prior. Softmax is invariant to shifting a row, so the
/// row mean additionally gets a standard normal prior to keep the density on
/// logits proper.
#[derive(Debug, Clone)]
pub struct UnknownTransitionSpec {
    pub base: FinitePosteriorSpec,
    pub concentration: f64,
    pub shift_std: f64,
}

impl UnknownTransitionSpec {
    pub fn new(base: FinitePosteriorSpec) -> Self {
        UnknownTransitionSpec { base, concentration: 1.0, shift_std: 1.0 }
    }

    pub fn value_dim(&self) -> usize {
        self.base.dim()
    }

    pub fn logit_dim(&self) -> usize {
        self.base.mdp.n_pairs() * self.base.mdp.n_states()
    }

    pub fn dim(&self) -> usize {
        self.value_dim() + self.logit_dim()
    }
}

#[derive(Debug, Clone)]
pub struct UnknownTransitionPosterior {
    spec: UnknownTransitionSpec,
    counts_sa: Vec<f64>,
    counts_s: Vec<f64>,
    transition_counts: Vec<f64>,
    live_rows: Vec<f64>,
    value_idx: Arc<[usize]>,
    logit_idx: Arc<[usize]>,
    /// Entry `((s,a), s')` of the transition matrix, flattened, adds
    /// `pi(a|s) P(s'|s,a)` to cell `(s, s')` of the state kernel.
    entry_pair: Arc<[usize]>,
    scatter: Arc<CsrMatrix>,
}

impl UnknownTransitionPosterior {
    pub fn new(spec: UnknownTransitionSpec) -> Result<Self> {
        spec.base.validate()?;
        if spec.base.prior_pairs.is_some() {
            return Err(Error::InvalidModel("a restricted prior needs known transitions".into()));
        }
        if !(spec.concentration > 0.0 && spec.shift_std > 0.0) {
            return Err(Error::InvalidModel("concentration and shift std must be positive".into()));
        }
        let mdp = &spec.base.mdp;
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let (counts_sa, counts_s) = demo_counts(mdp, &spec.base.demos);
        let mut transition_counts = vec![0.0; na * ns * ns];
        for t in &spec.base.demos.transitions {
            transition_counts[(t.state * na + t.action) * ns + t.next_state] += 1.0;
        }
        let live_rows = (0..mdp.n_pairs()).map(|i| if mdp.is_terminal(i / na) { 0.0 } else { 1.0 }).collect();
        let dim = spec.value_dim();
        let mut entry_pair = Vec::with_capacity(na * ns * ns);
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ns * ns];
        for i in 0..mdp.n_pairs() {
            for next in 0..ns {
                rows[(i / na) * ns + next].push((entry_pair.len(), 1.0));
                entry_pair.push(i);
            }
        }
        Ok(UnknownTransitionPosterior {
            scatter: Arc::new(CsrMatrix::from_rows(entry_pair.len(), &rows)),
            entry_pair: entry_pair.into(),
            value_idx: (0..dim).collect(),
            logit_idx: (dim..spec.dim()).collect(),
            spec,
            counts_sa,
            counts_s,
            transition_counts,
            live_rows,
        })
    }

    pub fn spec(&self) -> &UnknownTransitionSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    /// Log posterior and gradient; aux is the reward followed by the
    /// flattened `[s][a][s']` transition tensor.
    pub fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: theta.len() });
        }
        let base = &self.spec.base;
        let mdp = &base.mdp;
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let gamma = mdp.discount();
        let mut det_const = 0.0;
        let (logp, grad, aux) = grad_with(theta, |t, x| {
            let values = t.gather(x, &self.value_idx);
            let logits = t.gather(x, &self.logit_idx);
            let lmat = t.reshape(logits, Shape::new(na * ns, ns));
            let lse = t.row_logsumexp(lmat);
            let log_p = t.sub(lmat, lse);
            let p = t.exp(log_p);
            let live = t.constant(self.live_rows.clone(), Shape::col(na * ns));
            let p_cont = t.mul(p, live);

            let parts = bellman(t, values, base, &Continuation::Learned(p_cont));
            let mut lp = base.prior.on_tape(t, parts.reward);
            match base.det_mode {
                DetMode::Omitted => {}
                DetMode::Exact => {
                    let m = self.state_kernel(t, parts.policy, p_cont);
                    let ld = log_det_i_minus(t, m, gamma, ns);
                    lp = t.add(lp, ld);
                }
                DetMode::Detached => {
                    let onehot = greedy_policy_matrix(t.value(parts.greedy_scores), na);
                    det_const = self.detached_logdet(&onehot, t.value(p_cont));
                }
            }
            let prior_p = self.transition_prior(t, lmat, log_p);
            lp = t.add(lp, prior_p);
            let ll = likelihood_on_tape(t, parts.q, base.alpha, &self.counts_sa, &self.counts_s);
            lp = t.add(lp, ll);
            let counts = t.constant(self.transition_counts.clone(), Shape::new(na * ns, ns));
            let lt = t.dot(log_p, counts);
            lp = t.add(lp, lt);

            let mut aux = t.value(parts.reward).to_vec();
            aux.extend_from_slice(t.value(p));
            (lp, aux)
        })?;
        if !det_const.is_finite() {
            return Err(Error::Singular("I - gamma P̄ under the greedy policy".into()));
        }
        Ok(Evaluation::new(logp + det_const, grad).with_aux(aux))
    }

    fn state_kernel(&self, t: &mut Tape, policy: Var, p_cont: Var) -> Var {
        let ns = self.spec.base.mdp.n_states();
        let pi_e = t.gather(policy, &self.entry_pair);
        let n = t.shape(p_cont).len();
        let flat_p = t.reshape(p_cont, Shape::col(n));
        let w = t.mul(pi_e, flat_p);
        let flat = t.sparse_matvec(&self.scatter, w);
        t.reshape(flat, Shape::new(ns, ns))
    }

    fn detached_logdet(&self, policy: &[f64], p_cont: &[f64]) -> f64 {
        let ns = self.spec.base.mdp.n_states();
        let gamma = self.spec.base.mdp.discount();
        let mut a = identity(ns);
        for (e, &pair) in self.entry_pair.iter().enumerate() {
            let s = pair / self.spec.base.mdp.n_actions();
            let next = e % ns;
            a[s * ns + next] -= gamma * policy[pair] * p_cont[e];
        }
        linalg::log_det_positive(ns, &a).unwrap_or(f64::NAN)
    }

    /// Dirichlet density of the softmax rows, the logits-to-simplex
    /// log-Jacobian `sum_i log p_i`, and the normal prior on row means.
    fn transition_prior(&self, t: &mut Tape, lmat: Var, log_p: Var) -> Var {
        let k = self.spec.base.mdp.n_states() as f64;
        let rows = self.spec.base.mdp.n_pairs() as f64;
        let kappa = self.spec.concentration;
        let total_log_p = t.sum(log_p);
        // (kappa - 1) sum log p from the density plus sum log p from the Jacobian
        let dirichlet = t.scale(total_log_p, kappa);
        let means = t.row_sum(lmat);
        let means = t.scale(means, 1.0 / k);
        let z = t.scale(means, 1.0 / self.spec.shift_std);
        let ss = t.dot(z, z);
        let shift = t.scale(ss, -0.5);
        let norm = rows * (ln_gamma(k * kappa) - k * ln_gamma(kappa))
            - rows * (self.spec.shift_std.ln() + 0.5 * (2.0 * PI).ln());
        let c = t.scalar(norm);
        let a = t.add(dirichlet, shift);
        t.add(a, c)
    }
}

fn log_det_i_minus(t: &mut Tape, m: Var, gamma: f64, n: usize) -> Var {
    let scaled = t.scale(m, gamma);
    let eye = t.constant(identity(n), Shape::new(n, n));
    let a = t.sub(eye, scaled);
    t.logdet(a)
}

/// Transition probabilities estimated by counting demonstrated transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalTransitions {
    n_states: usize,
    n_actions: usize,
    /// Normalised rows; zero rows for unobserved pairs.
    probs: Vec<f64>,
    totals: Vec<f64>,
}

/// `p̂(s'|s,a) = count(s,a,s') / count(s,a)` over the demonstrations.
pub fn empirical_transition_shortcut(
    demos: &Demonstration,
    n_states: usize,
    n_actions: usize,
) -> Result<EmpiricalTransitions> {
    let mut probs = vec![0.0; n_states * n_actions * n_states];
    let mut totals = vec![0.0; n_states * n_actions];
    for t in &demos.transitions {
        if t.state >= n_states || t.next_state >= n_states || t.action >= n_actions {
            return Err(Error::InvalidModel(format!("transition {t:?} out of bounds")));
        }
        let i = t.state * n_actions + t.action;
        probs[i * n_states + t.next_state] += 1.0;
        totals[i] += 1.0;
    }
    for (i, total) in totals.iter().enumerate() {
        if *total > 0.0 {
            probs[i * n_states..(i + 1) * n_states].iter_mut().for_each(|p| *p /= total);
        }
    }
    Ok(EmpiricalTransitions { n_states, n_actions, probs, totals })
}

impl EmpiricalTransitions {
    pub fn is_observed(&self, s: usize, a: usize) -> bool {
        self.totals[s * self.n_actions + a] > 0.0
    }

    /// One flag per pair, state-major.
    pub fn observed_mask(&self) -> Vec<bool> {
        self.totals.iter().map(|t| *t > 0.0).collect()
    }

    pub fn row(&self, s: usize, a: usize) -> Result<&[f64]> {
        if !self.is_observed(s, a) {
            return Err(Error::UnobservedPair { state: s, action: a });
        }
        let i = s * self.n_actions + a;
        Ok(&self.probs[i * self.n_states..(i + 1) * self.n_states])
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> Result<f64> {
        Ok(self.row(s, a)?[next])
    }

    /// An MDP with the estimated rows where observed; other rows keep the
    /// template's terminal structure and otherwise self-loop. Those rows are
    /// placeholders and must not be read as estimates.
    pub fn to_mdp(&self, template: &FiniteMdp) -> Result<FiniteMdp> {
        let (ns, na) = (self.n_states, self.n_actions);
        if template.n_states() != ns || template.n_actions() != na {
            return Err(Error::Dimension { expected: template.n_pairs(), got: ns * na });
        }
        let mut transitions = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for a in 0..na {
                let i = s * na + a;
                let row = &mut transitions[i * ns..(i + 1) * ns];
                if self.is_observed(s, a) && !template.is_terminal(s) {
                    row.copy_from_slice(&self.probs[i * ns..(i + 1) * ns]);
                } else {
                    row[s] = 1.0;
                }
            }
        }
        let mdp = FiniteMdp::new(
            ns,
            na,
            transitions,
            template.discount(),
            template.terminal_mask().to_vec(),
            template.initial_dist().to_vec(),
        )?;
        match template.features() {
            Some(f) => mdp.with_features(f.to_vec()),
            None => Ok(mdp),
        }
    }

    /// Finite posterior over state-action values on the estimated dynamics,
    /// with the reward prior only on observed pairs.
    pub fn posterior_spec(&self, template: &FiniteMdp, demos: Demonstration) -> Result<FinitePosteriorSpec> {
        let mut spec = FinitePosteriorSpec::new(self.to_mdp(template)?, demos);
        spec.value_space = ValueSpace::StateAction;
        spec.prior_pairs = Some(self.observed_mask());
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{boltzmann_expert_rollout, gridworld_by_size, value_iteration, Transition};
    use crate::sampler::{nuts_sample, SamplerConfig};
    use crate::valuewalk::finite::{log_posterior_finite, FinitePosterior};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn demo(ts: &[(usize, usize, usize)]) -> Demonstration {
        Demonstration::new(
            "custom",
            3.0,
            0,
            ts.iter().map(|&(state, action, next_state)| Transition { state, action, next_state }).collect(),
        )
    }

    fn stochastic_mdp() -> FiniteMdp {
        let t = vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.3, 0.3, 0.4, 0.1, 0.1, 0.8, 0.5, 0.25, 0.25, 0.2, 0.2, 0.6];
        FiniteMdp::new(3, 2, t, 0.8, vec![false; 3], vec![1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn empirical_counts() {
        let e = empirical_transition_shortcut(&demo(&[(0, 0, 1), (0, 0, 1)]), 3, 1).unwrap();
        assert_eq!(e.prob(0, 0, 1).unwrap(), 1.0);
        let e = empirical_transition_shortcut(&demo(&[(0, 0, 1), (0, 0, 2)]), 3, 1).unwrap();
        assert_eq!(e.prob(0, 0, 1).unwrap(), 0.5);
        assert_eq!(e.prob(0, 0, 2).unwrap(), 0.5);
        assert!(matches!(e.prob(1, 0, 0), Err(Error::UnobservedPair { state: 1, action: 0 })));
    }

    #[test]
    fn empirical_matches_deterministic_gridworld() {
        let g = gridworld_by_size(3).unwrap();
        let q = value_iteration(&g.mdp, &g.reward, 1e-10);
        let demos = boltzmann_expert_rollout(&g.mdp, &q, 3.0, 10_000, 1);
        let e = empirical_transition_shortcut(&demos, 9, 4).unwrap();
        let mut visited = 0;
        for s in 0..9 {
            for a in 0..4 {
                if e.is_observed(s, a) {
                    visited += 1;
                    assert_eq!(e.row(s, a).unwrap(), g.mdp.transition_row(s, a));
                }
            }
        }
        assert!(visited > 0);
    }

    #[test]
    fn empirical_posterior_is_proper_in_unseen_pairs() {
        let g = gridworld_by_size(3).unwrap();
        let q = value_iteration(&g.mdp, &g.reward, 1e-10);
        let demos = boltzmann_expert_rollout(&g.mdp, &q, 3.0, 50, 3);
        let e = empirical_transition_shortcut(&demos, 9, 4).unwrap();
        let spec = e.posterior_spec(&g.mdp, demos).unwrap();
        let post = FinitePosterior::new(spec).unwrap();
        let unseen = e.observed_mask().iter().position(|o| !o).unwrap();
        let mut theta = vec![0.0; 36];
        let base = post.log_density(&theta).unwrap();
        theta[unseen] = -1e3;
        assert!(post.log_density(&theta).unwrap() < base - 100.0);
    }

    fn logits_of(mdp: &FiniteMdp) -> Vec<f64> {
        // log-probabilities shifted to zero row mean
        let ns = mdp.n_states();
        mdp.transitions()
            .chunks(ns)
            .flat_map(|row| {
                let logs: Vec<f64> = row.iter().map(|p| p.ln()).collect();
                let m = logs.iter().sum::<f64>() / ns as f64;
                logs.into_iter().map(move |l| l - m)
            })
            .collect()
    }

    #[test]
    fn known_transition_limit() {
        let mdp = stochastic_mdp();
        let demos = demo(&[(0, 1, 2), (2, 0, 2), (2, 1, 0), (1, 1, 1)]);
        for mode in [DetMode::Omitted, DetMode::Exact, DetMode::Detached] {
            let base = FinitePosteriorSpec::new(mdp.clone(), demos.clone()).with_det_mode(mode);
            let post = UnknownTransitionPosterior::new(UnknownTransitionSpec::new(base.clone())).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let logits = logits_of(&mdp);
            let mut theta = q.clone();
            theta.extend(&logits);
            let joint = post.evaluate(&theta).unwrap().logp;
            let (finite, _) = log_posterior_finite(&q, &base).unwrap();
            // independent transition terms: Dirichlet density, Jacobian,
            // zero-mean shift prior and the observed transition log-probabilities
            let mut extra = 0.0;
            for row in mdp.transitions().chunks(3) {
                // Dirichlet(1, 1, 1) is uniform on the simplex with density 2
                extra += 2f64.ln();
                extra += row.iter().map(|p| p.ln()).sum::<f64>();
                extra += -0.5 * (2.0 * PI).ln();
            }
            for t in &demos.transitions {
                extra += mdp.prob(t.state, t.action, t.next_state).ln();
            }
            assert!((joint - (finite + extra)).abs() < 1e-9, "{mode:?}: {joint} vs {}", finite + extra);
        }
    }

    #[test]
    fn separable_without_data() {
        let mdp = stochastic_mdp().with_discount(0.0).unwrap();
        let base = FinitePosteriorSpec::new(mdp, demo(&[])).with_det_mode(DetMode::Omitted);
        let post = UnknownTransitionPosterior::new(UnknownTransitionSpec::new(base.clone())).unwrap();
        let q = [0.5, -1.0, 2.0, 0.0, 1.5, -0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut values = Vec::new();
        for _ in 0..3 {
            let mut theta = q.to_vec();
            theta.extend((0..18).map(|_| rng.random_range(-1.0..1.0)));
            let (finite, _) = log_posterior_finite(&q, &base).unwrap();
            values.push(post.evaluate(&theta).unwrap().logp - finite);
        }
        // the reward factor does not depend on the logits at all
        let mut theta = q.to_vec();
        theta.extend(vec![0.0; 18]);
        let flat = post.evaluate(&theta).unwrap().logp - log_posterior_finite(&q, &base).unwrap().0;
        let uniform = 6.0 * (ln_gamma(3.0) + 3.0 * (1.0f64 / 3.0).ln() - 0.5 * (2.0 * PI).ln());
        assert!((flat - uniform).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mdp = stochastic_mdp();
        let demos = demo(&[(0, 1, 2), (2, 0, 2), (2, 1, 0)]);
        for mode in [DetMode::Exact, DetMode::Omitted] {
            let mut base = FinitePosteriorSpec::new(mdp.clone(), demos.clone()).with_det_mode(mode);
            base.alpha_bar = 2.0;
            let post = UnknownTransitionPosterior::new(UnknownTransitionSpec::new(base)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let theta: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let e = post.evaluate(&theta).unwrap();
            for i in 0..theta.len() {
                let (mut p, mut m) = (theta.clone(), theta.clone());
                p[i] += 1e-5;
                m[i] -= 1e-5;
                let fd = (post.evaluate(&p).unwrap().logp - post.evaluate(&m).unwrap().logp) / 2e-5;
                assert!((fd - e.grad[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", e.grad[i]);
            }
        }
    }

    #[test]
    fn transition_row_concentrates_on_observed_successor() {
        // one action, three states; 50 observations of 0 -> 1
        let t = vec![1.0 / 3.0; 9];
        let mdp = FiniteMdp::new(3, 1, t, 0.9, vec![false; 3], vec![1.0, 0.0, 0.0]).unwrap();
        let demos = demo(&vec![(0, 0, 1); 50]);
        let base = FinitePosteriorSpec::new(mdp, demos).with_det_mode(DetMode::Exact);
        let post = UnknownTransitionPosterior::new(UnknownTransitionSpec::new(base)).unwrap();
        let f = |th: &[f64]| post.evaluate(th);
        let cfg = SamplerConfig::new(vec![0.0; post.dim()], 500, 2000, 11);
        let out = nuts_sample(f, &cfg).unwrap();
        let aux = out.aux_samples.unwrap();
        // aux = reward (3) then P[s][a][s']; P(1 | 0, 0) sits at 3 + 1
        let mean = aux.iter().map(|row| row[3 + 1]).sum::<f64>() / aux.len() as f64;
        let conjugate = 51.0 / 53.0;
        assert!(mean > 0.9, "{mean}");
        assert!((mean - conjugate).abs() < 0.02, "{mean} vs {conjugate}");
    }
}
