//! Reference implementation of the SFT and DPO objectives on a toy
//! categorical policy, small enough to verify numerically.
//!
//! A policy is a prompts × completions logit matrix; each row softmaxes into
//! a distribution over completions. The preference loss over pairs
//! (prompt, chosen, rejected) is
//!
//! ```text
//! L = -mean_i log sigmoid( beta * ( [log pi_theta(ch_i) - log pi_ref(ch_i)]
//!                                 - [log pi_theta(rej_i) - log pi_ref(rej_i)] ) )
//! ```
//!
//! which sits at ln 2 when theta equals the reference (all margins zero) and
//! decreases as the policy separates chosen from rejected completions. The
//! analytic gradient is checked against central finite differences rather
//! than trusted.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DpoError {
    #[error("policy must have at least one prompt and one completion")]
    EmptyPolicy,
    #[error("policy rows must all have the same length")]
    RaggedRows,
    #[error("non-finite logit at [{0}][{1}]")]
    NonFiniteLogit(usize, usize),
    #[error("index out of range: prompt {prompt_id}, completion {completion_id}")]
    IndexOutOfRange { prompt_id: usize, completion_id: usize },
    #[error("pair {0} has identical chosen and rejected completions")]
    DegeneratePair(usize),
    #[error("policies must share dimensions: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("data must be non-empty")]
    EmptyData,
    #[error("epsilon {0} outside [1e-8, 1e-3]")]
    InvalidEpsilon(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// A prompts × completions table of logits; row `p` softmaxes into the
/// policy's distribution over completions for prompt `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    logits: Vec<Vec<f64>>,
}

impl ToyPolicy {
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self, DpoError> {
        if logits.is_empty() || logits[0].is_empty() {
            return Err(DpoError::EmptyPolicy);
        }
        let width = logits[0].len();
        for (p, row) in logits.iter().enumerate() {
            if row.len() != width {
                return Err(DpoError::RaggedRows);
            }
            for (c, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(DpoError::NonFiniteLogit(p, c));
                }
            }
        }
        Ok(Self { logits })
    }

    pub fn uniform(prompts: usize, completions: usize) -> Result<Self, DpoError> {
        Self::new(vec![vec![0.0; completions]; prompts])
    }

    pub fn prompts(&self) -> usize {
        self.logits.len()
    }

    pub fn completions(&self) -> usize {
        self.logits[0].len()
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn logit(&self, prompt_id: usize, completion_id: usize) -> f64 {
        self.logits[prompt_id][completion_id]
    }

    pub fn set_logit(&mut self, prompt_id: usize, completion_id: usize, value: f64) {
        self.logits[prompt_id][completion_id] = value;
    }

    fn check_index(&self, prompt_id: usize, completion_id: usize) -> Result<(), DpoError> {
        if prompt_id >= self.prompts() || completion_id >= self.completions() {
            return Err(DpoError::IndexOutOfRange { prompt_id, completion_id });
        }
        Ok(())
    }
}

/// One preference observation on the toy policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyPair {
    pub prompt_id: usize,
    pub chosen_id: usize,
    pub rejected_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.1, learning_rate: 0.5, steps: 100 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(DpoError::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(DpoError::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Loss plus the per-pair diagnostics it was averaged from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub loss: f64,
    pub per_pair_margins: Vec<f64>,
    pub per_pair_sigmas: Vec<f64>,
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Log-probability of one completion under the row softmax, computed with
/// log-sum-exp so large logits stay finite.
pub fn policy_logprob(
    policy: &ToyPolicy,
    prompt_id: usize,
    completion_id: usize,
) -> Result<f64, DpoError> {
    policy.check_index(prompt_id, completion_id)?;
    let row = &policy.logits[prompt_id];
    Ok(row[completion_id] - log_sum_exp(row))
}

/// Mean negative log-likelihood of (prompt, completion) observations.
pub fn sft_nll(policy: &ToyPolicy, data: &[(usize, usize)]) -> Result<f64, DpoError> {
    if data.is_empty() {
        return Err(DpoError::EmptyData);
    }
    let mut total = 0.0;
    for &(p, c) in data {
        total += policy_logprob(policy, p, c)?;
    }
    Ok(-total / data.len() as f64)
}

fn check_pairs(theta: &ToyPolicy, reference: &ToyPolicy, pairs: &[ToyPair]) -> Result<(), DpoError> {
    if theta.prompts() != reference.prompts() || theta.completions() != reference.completions() {
        return Err(DpoError::ShapeMismatch(
            theta.prompts(),
            theta.completions(),
            reference.prompts(),
            reference.completions(),
        ));
    }
    if pairs.is_empty() {
        return Err(DpoError::EmptyData);
    }
    for (i, pair) in pairs.iter().enumerate() {
        theta.check_index(pair.prompt_id, pair.chosen_id)?;
        theta.check_index(pair.prompt_id, pair.rejected_id)?;
        if pair.chosen_id == pair.rejected_id {
            return Err(DpoError::DegeneratePair(i));
        }
    }
    Ok(())
}

/// Mean `-log sigmoid(margin)` over the pairs, with per-pair margins and
/// sigmas reported for inspection.
pub fn dpo_loss(
    theta: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[ToyPair],
    beta: f64,
) -> Result<LossReport, DpoError> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(DpoError::InvalidConfig(format!("beta must be finite and >= 0, got {beta}")));
    }
    check_pairs(theta, reference, pairs)?;
    let mut margins = Vec::with_capacity(pairs.len());
    let mut sigmas = Vec::with_capacity(pairs.len());
    let mut total = 0.0;
    for pair in pairs {
        let chosen_gap = policy_logprob(theta, pair.prompt_id, pair.chosen_id)?
            - policy_logprob(reference, pair.prompt_id, pair.chosen_id)?;
        let rejected_gap = policy_logprob(theta, pair.prompt_id, pair.rejected_id)?
            - policy_logprob(reference, pair.prompt_id, pair.rejected_id)?;
        let margin = beta * (chosen_gap - rejected_gap);
        margins.push(margin);
        sigmas.push(sigmoid(margin));
        total += -log_sigmoid(margin);
    }
    Ok(LossReport { loss: total / pairs.len() as f64, per_pair_margins: margins, per_pair_sigmas: sigmas })
}

/// Analytic gradient of [`dpo_loss`] with respect to `theta`'s logits.
///
/// Because chosen and rejected share a prompt row, the softmax terms of the
/// two log-prob derivatives cancel and each pair contributes
/// `w * (onehot(rejected) - onehot(chosen))` to its row, with
/// `w = (1 - sigmoid(margin)) * beta / n_pairs`. The reference policy
/// receives no gradient.
pub fn dpo_gradient(
    theta: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[ToyPair],
    beta: f64,
) -> Result<Vec<Vec<f64>>, DpoError> {
    let report = dpo_loss(theta, reference, pairs, beta)?;
    let mut grad = vec![vec![0.0; theta.completions()]; theta.prompts()];
    let scale = beta / pairs.len() as f64;
    for (pair, sigma) in pairs.iter().zip(&report.per_pair_sigmas) {
        let w = (1.0 - sigma) * scale;
        grad[pair.prompt_id][pair.rejected_id] += w;
        grad[pair.prompt_id][pair.chosen_id] -= w;
    }
    Ok(grad)
}

/// Central-difference gradient of an arbitrary scalar function of the
/// policy: entry (p, c) is `(f(theta + eps*e_pc) - f(theta - eps*e_pc)) / (2 eps)`.
/// Serves as the independent oracle for [`dpo_gradient`].
pub fn finite_difference_gradient<F: Fn(&ToyPolicy) -> f64>(
    loss_fn: F,
    theta: &ToyPolicy,
    epsilon: f64,
) -> Result<Vec<Vec<f64>>, DpoError> {
    if !(1e-8..=1e-3).contains(&epsilon) {
        return Err(DpoError::InvalidEpsilon(epsilon));
    }
    let mut grad = vec![vec![0.0; theta.completions()]; theta.prompts()];
    let mut probe = theta.clone();
    for p in 0..theta.prompts() {
        for c in 0..theta.completions() {
            let base = theta.logit(p, c);
            probe.set_logit(p, c, base + epsilon);
            let up = loss_fn(&probe);
            probe.set_logit(p, c, base - epsilon);
            let down = loss_fn(&probe);
            probe.set_logit(p, c, base);
            grad[p][c] = (up - down) / (2.0 * epsilon);
        }
    }
    Ok(grad)
}

/// Plain gradient descent on the preference loss. Returns the trained policy
/// and one [`LossReport`] per step, measured before that step's update, so
/// `history[0]` is the loss at `theta0` and `steps == 0` leaves the policy
/// untouched with an empty history. The reference is never updated.
pub fn train_toy_dpo(
    theta0: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[ToyPair],
    config: &DpoConfig,
) -> Result<(ToyPolicy, Vec<LossReport>), DpoError> {
    config.validate()?;
    check_pairs(theta0, reference, pairs)?;
    let mut theta = theta0.clone();
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let report = dpo_loss(&theta, reference, pairs, config.beta)?;
        let grad = dpo_gradient(&theta, reference, pairs, config.beta)?;
        for p in 0..theta.prompts() {
            for c in 0..theta.completions() {
                let updated = theta.logit(p, c) - config.learning_rate * grad[p][c];
                theta.set_logit(p, c, updated);
            }
        }
        history.push(report);
    }
    Ok((theta, history))
}

/// Relative error with a floor on the denominator: below the floor the
/// comparison degrades to an absolute check, since central differences
/// cannot resolve relative error under their own roundoff noise
/// (~1e-11 at eps = 1e-5).
pub fn guarded_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Verification battery behind the `dpo-check` subcommand: loss identities,
/// the gradient-versus-finite-differences sweep, training dynamics, and the
/// structural invariants, all on seeded random instances.
pub mod verify {
    use super::*;

    pub const LN_2: f64 = std::f64::consts::LN_2;

    #[derive(Debug, Clone, Serialize)]
    pub struct CheckOutcome {
        pub name: String,
        pub passed: bool,
        pub cases: usize,
        pub worst: f64,
        pub bound: f64,
    }

    #[derive(Debug, Clone, Serialize)]
    pub struct VerificationReport {
        pub seed: u64,
        pub checks: Vec<CheckOutcome>,
        pub passed: bool,
    }

    pub struct RandomInstance {
        pub theta: ToyPolicy,
        pub reference: ToyPolicy,
        pub pairs: Vec<ToyPair>,
    }

    pub fn random_policy(rng: &mut StdRng, prompts: usize, completions: usize) -> ToyPolicy {
        let logits = (0..prompts)
            .map(|_| (0..completions).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        ToyPolicy::new(logits).expect("generated logits are finite and rectangular")
    }

    pub fn random_instance(rng: &mut StdRng) -> RandomInstance {
        let prompts = rng.gen_range(1..=4);
        let completions = rng.gen_range(2..=8);
        let theta = random_policy(rng, prompts, completions);
        let reference = random_policy(rng, prompts, completions);
        let n_pairs = rng.gen_range(1..=6);
        let pairs = (0..n_pairs)
            .map(|_| {
                let prompt_id = rng.gen_range(0..prompts);
                let chosen_id = rng.gen_range(0..completions);
                let mut rejected_id = rng.gen_range(0..completions);
                while rejected_id == chosen_id {
                    rejected_id = rng.gen_range(0..completions);
                }
                ToyPair { prompt_id, chosen_id, rejected_id }
            })
            .collect();
        RandomInstance { theta, reference, pairs }
    }

    /// Pairs whose chosen and rejected sides never overlap within a prompt,
    /// so gradient descent can push every margin up simultaneously.
    pub fn random_consistent_instance(rng: &mut StdRng) -> RandomInstance {
        let prompts = rng.gen_range(1..=3);
        let completions = rng.gen_range(2..=6);
        let reference = random_policy(rng, prompts, completions);
        let theta = reference.clone();
        let mut pairs = Vec::new();
        for prompt_id in 0..prompts {
            let cut = rng.gen_range(1..completions);
            let n = rng.gen_range(1..=3);
            for _ in 0..n {
                pairs.push(ToyPair {
                    prompt_id,
                    chosen_id: rng.gen_range(0..cut),
                    rejected_id: rng.gen_range(cut..completions),
                });
            }
        }
        RandomInstance { theta, reference, pairs }
    }

    fn outcome(name: &str, cases: usize, worst: f64, bound: f64) -> CheckOutcome {
        CheckOutcome { name: name.to_string(), passed: worst <= bound, cases, worst, bound }
    }

    pub fn run_battery(seed: u64) -> VerificationReport {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut checks = Vec::new();

        // Identity: theta == reference pins every margin at zero, so the
        // loss must equal ln 2 no matter the pairs or beta.
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let inst = random_instance(&mut rng);
            let beta = rng.gen_range(0.05..2.0);
            let report = dpo_loss(&inst.theta, &inst.theta, &inst.pairs, beta).unwrap();
            worst = worst.max((report.loss - LN_2).abs());
        }
        checks.push(outcome("loss_identity_theta_eq_ref", 50, worst, 1e-12));

        // beta == 0 collapses every margin to zero as well.
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let inst = random_instance(&mut rng);
            let report = dpo_loss(&inst.theta, &inst.reference, &inst.pairs, 0.0).unwrap();
            worst = worst.max((report.loss - LN_2).abs());
        }
        checks.push(outcome("loss_identity_beta_zero", 50, worst, 1e-12));

        // Closed form: probabilities 0.7/0.5 chosen, 0.3/0.5 rejected at
        // beta = 1 give sigma(ln(7/3)) = 0.7, hence loss -ln 0.7.
        let theta = ToyPolicy::new(vec![vec![0.7f64.ln(), 0.3f64.ln()]]).unwrap();
        let reference = ToyPolicy::uniform(1, 2).unwrap();
        let pair = [ToyPair { prompt_id: 0, chosen_id: 0, rejected_id: 1 }];
        let report = dpo_loss(&theta, &reference, &pair, 1.0).unwrap();
        checks.push(outcome("closed_form_pair", 1, (report.loss - (-0.7f64.ln())).abs(), 1e-10));

        // sigma(margin) must equal R^beta / (1 + R^beta) for the probability
        // ratio R = [pi_theta(ch) pi_ref(rej)] / [pi_ref(ch) pi_theta(rej)].
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let inst = random_instance(&mut rng);
            let beta = rng.gen_range(0.1..1.5);
            let report = dpo_loss(&inst.theta, &inst.reference, &inst.pairs, beta).unwrap();
            for (pair, sigma) in inst.pairs.iter().zip(&report.per_pair_sigmas) {
                let ratio = (policy_logprob(&inst.theta, pair.prompt_id, pair.chosen_id).unwrap()
                    - policy_logprob(&inst.reference, pair.prompt_id, pair.chosen_id).unwrap()
                    + policy_logprob(&inst.reference, pair.prompt_id, pair.rejected_id).unwrap()
                    - policy_logprob(&inst.theta, pair.prompt_id, pair.rejected_id).unwrap())
                .exp();
                let expected = ratio.powf(beta) / (1.0 + ratio.powf(beta));
                worst = worst.max((sigma - expected).abs());
            }
        }
        checks.push(outcome("sigma_ratio_identity", 50, worst, 1e-10));

        // Analytic gradient against central finite differences.
        let mut worst = 0.0f64;
        let mut cases = 0;
        for _ in 0..120 {
            let inst = random_instance(&mut rng);
            for beta in [0.1, 0.5, 1.0] {
                let analytic = dpo_gradient(&inst.theta, &inst.reference, &inst.pairs, beta).unwrap();
                let numeric = finite_difference_gradient(
                    |policy| dpo_loss(policy, &inst.reference, &inst.pairs, beta).unwrap().loss,
                    &inst.theta,
                    1e-5,
                )
                .unwrap();
                for p in 0..inst.theta.prompts() {
                    for c in 0..inst.theta.completions() {
                        worst = worst.max(guarded_rel_err(analytic[p][c], numeric[p][c]));
                    }
                }
                cases += 1;
            }
        }
        checks.push(outcome("gradient_vs_finite_differences", cases, worst, 1e-6));

        // Training from theta0 == reference: loss must never increase and the
        // margins of a consistent pair set must end clearly separated.
        let mut worst_increase = 0.0f64;
        let mut worst_sigma = 1.0f64;
        for _ in 0..10 {
            let inst = random_consistent_instance(&mut rng);
            let config = DpoConfig { beta: 1.0, learning_rate: 0.5, steps: 200 };
            let (trained, history) = train_toy_dpo(&inst.theta, &inst.reference, &inst.pairs, &config).unwrap();
            let final_report = dpo_loss(&trained, &inst.reference, &inst.pairs, config.beta).unwrap();
            let mut losses: Vec<f64> = history.iter().map(|r| r.loss).collect();
            losses.push(final_report.loss);
            for window in losses.windows(2) {
                worst_increase = worst_increase.max(window[1] - window[0]);
            }
            for sigma in final_report.per_pair_sigmas {
                worst_sigma = worst_sigma.min(sigma);
            }
        }
        checks.push(outcome("training_loss_monotone", 10, worst_increase, 1e-12));
        checks.push(outcome("training_final_sigma_above_0_9", 10, 0.9 - worst_sigma, 0.0));

        // Conflicting symmetric pairs: updates cancel, loss stays at ln 2.
        let reference = random_policy(&mut rng, 1, 2);
        let pairs = [
            ToyPair { prompt_id: 0, chosen_id: 0, rejected_id: 1 },
            ToyPair { prompt_id: 0, chosen_id: 1, rejected_id: 0 },
        ];
        let config = DpoConfig { beta: 1.0, learning_rate: 0.5, steps: 100 };
        let (trained, history) = train_toy_dpo(&reference, &reference, &pairs, &config).unwrap();
        let final_loss = dpo_loss(&trained, &reference, &pairs, config.beta).unwrap().loss;
        let worst = history
            .iter()
            .map(|r| (r.loss - LN_2).abs())
            .fold((final_loss - LN_2).abs(), f64::max);
        checks.push(outcome("conflicting_pairs_stay_at_ln2", 100, worst, 1e-9));

        // Shift invariance: adding one constant to the same row of theta and
        // the reference leaves every margin, and hence the loss, unchanged.
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let inst = random_instance(&mut rng);
            let beta = rng.gen_range(0.1..1.5);
            let base = dpo_loss(&inst.theta, &inst.reference, &inst.pairs, beta).unwrap().loss;
            let row = rng.gen_range(0..inst.theta.prompts());
            let shift = rng.gen_range(-5.0..5.0);
            let mut theta = inst.theta.clone();
            let mut reference = inst.reference.clone();
            for c in 0..theta.completions() {
                theta.set_logit(row, c, theta.logit(row, c) + shift);
                reference.set_logit(row, c, reference.logit(row, c) + shift);
            }
            let shifted = dpo_loss(&theta, &reference, &inst.pairs, beta).unwrap().loss;
            worst = worst.max((shifted - base).abs());
        }
        checks.push(outcome("row_shift_invariance", 20, worst, 1e-10));

        // SFT sanity: descending the NLL's own finite-difference gradient
        // must reduce it.
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let mut policy = random_policy(&mut rng, 2, 4);
            let data: Vec<(usize, usize)> =
                (0..6).map(|_| (rng.gen_range(0..2), rng.gen_range(0..4))).collect();
            let before = sft_nll(&policy, &data).unwrap();
            for _ in 0..50 {
                let grad = finite_difference_gradient(
                    |p| sft_nll(p, &data).unwrap(),
                    &policy,
                    1e-5,
                )
                .unwrap();
                for p in 0..policy.prompts() {
                    for c in 0..policy.completions() {
                        let updated = policy.logit(p, c) - 0.5 * grad[p][c];
                        policy.set_logit(p, c, updated);
                    }
                }
            }
            let after = sft_nll(&policy, &data).unwrap();
            worst = worst.max(after - before);
        }
        checks.push(outcome("sft_nll_descends", 5, worst, 0.0));

        let passed = checks.iter().all(|c| c.passed);
        VerificationReport { seed, checks, passed }
    }
}
