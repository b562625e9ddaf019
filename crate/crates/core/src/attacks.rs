//! Evasion attacks on box-constrained inputs.
//!
//! Five attacks are provided: the identity (clean) attack, the one-step
//! gradient-sign attack, its iterated projected variant, a gradient-free
//! stochastic-approximation attack, and an optimization-based minimum-norm
//! attack. The budgeted attacks keep every iterate inside the infinity-norm
//! ball of radius epsilon around the original input and inside `[0,1]^d`.
//! All attacks are deterministic functions of (spec, model, input, label).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::rng::{mix, rng_from};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),

    #[error("invalid attack spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite {0} encountered during attack")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Clean,
    Fgsm,
    Pgd,
    Spsa,
    Cw,
}

impl AttackKind {
    pub fn id(self) -> &'static str {
        match self {
            AttackKind::Clean => "clean",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Spsa => "spsa",
            AttackKind::Cw => "cw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clean" => Some(AttackKind::Clean),
            "fgsm" => Some(AttackKind::Fgsm),
            "pgd" => Some(AttackKind::Pgd),
            "spsa" => Some(AttackKind::Spsa),
            "cw" => Some(AttackKind::Cw),
            _ => None,
        }
    }

    pub const ALL: [AttackKind; 5] = [
        AttackKind::Clean,
        AttackKind::Fgsm,
        AttackKind::Pgd,
        AttackKind::Spsa,
        AttackKind::Cw,
    ];
}

/// Full configuration of one attack. Fields not used by a kind are ignored
/// by it (epsilon, for instance, does not constrain the minimum-norm
/// attack unless `cw_clip_to_eps` is set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Infinity-norm budget for the budgeted attacks.
    pub epsilon: f64,
    pub pgd_step: f64,
    pub pgd_iters: usize,
    /// Smoothing radius of the two-point gradient estimator.
    pub spsa_delta: f64,
    pub spsa_samples: usize,
    pub spsa_step: f64,
    pub spsa_iters: usize,
    /// Weight of the misclassification term in the minimum-norm objective.
    pub cw_c: f64,
    pub cw_kappa: f64,
    pub cw_steps: usize,
    pub cw_lr: f64,
    /// Clip the minimum-norm attack back into the epsilon ball afterwards.
    pub cw_clip_to_eps: bool,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            epsilon: 0.1,
            pgd_step: 0.025,
            pgd_iters: 10,
            spsa_delta: 0.01,
            spsa_samples: 8,
            spsa_step: 0.025,
            spsa_iters: 10,
            cw_c: 1.0,
            cw_kappa: 0.0,
            cw_steps: 100,
            cw_lr: 0.05,
            cw_clip_to_eps: false,
            seed: 0,
        }
    }

    pub fn id(&self) -> &'static str {
        self.kind.id()
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |msg: String| Err(AttackError::InvalidSpec(msg));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        match self.kind {
            AttackKind::Clean | AttackKind::Fgsm => {}
            AttackKind::Pgd => {
                if !(self.pgd_step > 0.0) {
                    return bad(format!("pgd_step must be positive, got {}", self.pgd_step));
                }
                if self.pgd_iters < 1 {
                    return bad("pgd_iters must be >= 1".into());
                }
            }
            AttackKind::Spsa => {
                if !(self.spsa_delta > 0.0) {
                    return bad(format!("spsa_delta must be positive, got {}", self.spsa_delta));
                }
                if !(self.spsa_step > 0.0) {
                    return bad(format!("spsa_step must be positive, got {}", self.spsa_step));
                }
                if self.spsa_samples < 1 || self.spsa_iters < 1 {
                    return bad("spsa_samples and spsa_iters must be >= 1".into());
                }
            }
            AttackKind::Cw => {
                if !(self.cw_c >= 0.0) {
                    return bad(format!("cw_c must be nonnegative, got {}", self.cw_c));
                }
                if !(self.cw_kappa >= 0.0) {
                    return bad(format!("cw_kappa must be nonnegative, got {}", self.cw_kappa));
                }
                if self.cw_steps < 1 {
                    return bad("cw_steps must be >= 1".into());
                }
                if !(self.cw_lr > 0.0) {
                    return bad(format!("cw_lr must be positive, got {}", self.cw_lr));
                }
            }
        }
        Ok(())
    }
}

/// sign with sign(0) = 0, so zero-gradient coordinates are left unmoved.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_input(model: &dyn Model, x: &[f64]) -> Result<(), AttackError> {
    if x.len() != model.dim() {
        return Err(AttackError::Model(ModelError::DimensionMismatch {
            expected: model.dim(),
            got: x.len(),
        }));
    }
    Ok(())
}

fn finite_or(grad: &[f64], what: &'static str) -> Result<(), AttackError> {
    if grad.iter().any(|g| g.is_nan()) {
        return Err(AttackError::NonFinite(what));
    }
    Ok(())
}

/// Dispatch to the attack named by the spec. Budgeted attacks return a
/// point within the epsilon ball and the unit box; the clean attack
/// returns the input unchanged.
pub fn apply_attack(
    spec: &AttackSpec,
    model: &dyn Model,
    x: &[f64],
    y: usize,
) -> Result<Vec<f64>, AttackError> {
    spec.validate()?;
    check_input(model, x)?;
    match spec.kind {
        AttackKind::Clean => Ok(x.to_vec()),
        AttackKind::Fgsm => fgsm(model, x, y, spec.epsilon),
        AttackKind::Pgd => pgd(model, x, y, spec.epsilon, spec.pgd_step, spec.pgd_iters),
        AttackKind::Spsa => spsa(model, x, y, spec),
        AttackKind::Cw => cw(model, x, y, spec),
    }
}

/// One step of size epsilon along the sign of the input gradient, clipped
/// to the unit box.
pub fn fgsm(model: &dyn Model, x: &[f64], y: usize, epsilon: f64) -> Result<Vec<f64>, AttackError> {
    check_input(model, x)?;
    let grad = model.input_gradient(x, y)?;
    finite_or(&grad, "gradient")?;
    Ok(x.iter()
        .zip(&grad)
        .map(|(&xi, &gi)| (xi + epsilon * sign(gi)).clamp(0.0, 1.0))
        .collect())
}

/// Iterated gradient-sign ascent with projection back into the epsilon
/// ball after each step. Starts from the input itself (no random init);
/// one iteration with step >= epsilon reproduces [`fgsm`] bit for bit.
pub fn pgd(
    model: &dyn Model,
    x: &[f64],
    y: usize,
    epsilon: f64,
    step: f64,
    iters: usize,
) -> Result<Vec<f64>, AttackError> {
    check_input(model, x)?;
    if !(step > 0.0) {
        return Err(AttackError::InvalidSpec(format!("pgd step must be positive, got {step}")));
    }
    if iters < 1 {
        return Err(AttackError::InvalidSpec("pgd iters must be >= 1".into()));
    }
    let mut cur = x.to_vec();
    for _ in 0..iters {
        let grad = model.input_gradient(&cur, y)?;
        finite_or(&grad, "gradient")?;
        for (j, c) in cur.iter_mut().enumerate() {
            let moved = *c + step * sign(grad[j]);
            *c = moved.min(x[j] + epsilon).max(x[j] - epsilon).clamp(0.0, 1.0);
        }
    }
    Ok(cur)
}

/// Gradient-free variant of [`pgd`]: the gradient is estimated from
/// two-point evaluations along Rademacher directions scaled by
/// `spsa_delta`, averaged over `spsa_samples` draws, and only its sign is
/// used for the update.
pub fn spsa(model: &dyn Model, x: &[f64], y: usize, spec: &AttackSpec) -> Result<Vec<f64>, AttackError> {
    check_input(model, x)?;
    spec.validate()?;
    let d = x.len();
    let mut rng = rng_from(mix(spec.seed, "spsa"));
    let mut cur = x.to_vec();
    let mut probe = vec![0.0; d];
    for _ in 0..spec.spsa_iters {
        let mut estimate = vec![0.0; d];
        for _ in 0..spec.spsa_samples {
            let dirs: Vec<f64> = (0..d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            for j in 0..d {
                probe[j] = cur[j] + spec.spsa_delta * dirs[j];
            }
            let plus = model.loss(&probe, y)?;
            for j in 0..d {
                probe[j] = cur[j] - spec.spsa_delta * dirs[j];
            }
            let minus = model.loss(&probe, y)?;
            let scale = (plus - minus) / (2.0 * spec.spsa_delta);
            for j in 0..d {
                estimate[j] += scale * dirs[j];
            }
        }
        for e in &mut estimate {
            *e /= spec.spsa_samples as f64;
        }
        finite_or(&estimate, "gradient estimate")?;
        for (j, c) in cur.iter_mut().enumerate() {
            let moved = *c + spec.spsa_step * sign(estimate[j]);
            *c = moved
                .min(x[j] + spec.epsilon)
                .max(x[j] - spec.epsilon)
                .clamp(0.0, 1.0);
        }
    }
    Ok(cur)
}

/// Average sign-agreement between the two-point gradient estimate and a
/// reference gradient, over fresh draws at the unperturbed input. Exposed
/// for diagnostics and estimator quality tests.
pub fn spsa_sign_agreement(
    model: &dyn Model,
    x: &[f64],
    y: usize,
    spec: &AttackSpec,
    reference: &[f64],
) -> Result<f64, AttackError> {
    check_input(model, x)?;
    let d = x.len();
    let mut rng = rng_from(mix(spec.seed, "spsa"));
    let mut estimate = vec![0.0; d];
    let mut probe = vec![0.0; d];
    for _ in 0..spec.spsa_samples {
        let dirs: Vec<f64> = (0..d)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        for j in 0..d {
            probe[j] = x[j] + spec.spsa_delta * dirs[j];
        }
        let plus = model.loss(&probe, y)?;
        for j in 0..d {
            probe[j] = x[j] - spec.spsa_delta * dirs[j];
        }
        let minus = model.loss(&probe, y)?;
        let scale = (plus - minus) / (2.0 * spec.spsa_delta);
        for j in 0..d {
            estimate[j] += scale * dirs[j];
        }
    }
    let agree = estimate
        .iter()
        .zip(reference)
        .filter(|(e, r)| sign(**e) == sign(**r))
        .count();
    Ok(agree as f64 / d as f64)
}

/// Minimum-norm attack: minimizes `||x' - x||^2 + c * f(x')` over an
/// unconstrained variable `w` with `x' = (tanh(w) + 1) / 2`, where
/// `f(x') = max(z_y - max_{j!=y} z_j, -kappa)` pushes the true-class logit
/// below the best other class. Unconstrained by epsilon unless
/// `cw_clip_to_eps` is set. Fully deterministic.
pub fn cw(model: &dyn Model, x: &[f64], y: usize, spec: &AttackSpec) -> Result<Vec<f64>, AttackError> {
    check_input(model, x)?;
    spec.validate()?;
    let c = model.num_classes();
    if y >= c {
        return Err(AttackError::Model(ModelError::InvalidLabel {
            label: y,
            num_classes: c,
        }));
    }
    let d = x.len();
    // atanh is unbounded at the box corners; pull them in by 1e-9.
    let mut w: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let t = (2.0 * xi - 1.0).clamp(-1.0 + 1e-9, 1.0 - 1e-9);
            t.atanh()
        })
        .collect();

    let mut adv = vec![0.0; d];
    let mut tanh_w = vec![0.0; d];
    for _ in 0..spec.cw_steps {
        for j in 0..d {
            tanh_w[j] = w[j].tanh();
            adv[j] = (tanh_w[j] + 1.0) / 2.0;
        }
        let logits = model.logits(&adv)?;
        let z_true = logits[y];
        let mut best_other = usize::MAX;
        let mut best_val = f64::NEG_INFINITY;
        for (j, &z) in logits.iter().enumerate() {
            if j != y && z > best_val {
                best_val = z;
                best_other = j;
            }
        }
        let margin = z_true - best_val;

        // d/dx' of ||x'-x||^2 is 2 delta; the margin term is active only
        // above the -kappa floor.
        let mut dx: Vec<f64> = adv.iter().zip(x).map(|(&a, &xi)| 2.0 * (a - xi)).collect();
        if spec.cw_c > 0.0 && margin > -spec.cw_kappa {
            let mut dlogits = vec![0.0; c];
            dlogits[y] = 1.0;
            dlogits[best_other] = -1.0;
            let dmargin = model.backprop_input(&adv, &dlogits)?;
            for (dj, mj) in dx.iter_mut().zip(dmargin) {
                *dj += spec.cw_c * mj;
            }
        }
        finite_or(&dx, "objective gradient")?;
        for j in 0..d {
            let dwj = dx[j] * (1.0 - tanh_w[j] * tanh_w[j]) / 2.0;
            w[j] -= spec.cw_lr * dwj;
        }
    }
    let mut out: Vec<f64> = w.iter().map(|&wj| (wj.tanh() + 1.0) / 2.0).collect();
    if spec.cw_clip_to_eps {
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = o
                .min(xi + spec.epsilon)
                .max(xi - spec.epsilon)
                .clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Classifier;
    use crate::rng::rng_from;
    use rand::Rng;

    fn random_mlp(c: usize, d: usize, h: usize, seed: u64) -> Classifier {
        let mut m = Classifier::zeroed_mlp1(c, d, h);
        let mut rng = rng_from(seed);
        let n = m.params().len();
        let params: Vec<f64> = (0..n).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        m.set_params(&params).unwrap();
        m
    }

    fn linf(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn clean_is_identity() {
        let m = random_mlp(3, 4, 5, 1);
        let x = vec![0.1, 0.5, 0.9, 0.3];
        let spec = AttackSpec::new(AttackKind::Clean);
        assert_eq!(apply_attack(&spec, &m, &x, 0).unwrap(), x);
    }

    #[test]
    fn fgsm_zero_budget_and_zero_gradient() {
        let m = random_mlp(2, 3, 4, 2);
        let x = vec![0.2, 0.4, 0.6];
        assert_eq!(fgsm(&m, &x, 0, 0.0).unwrap(), x);
        let z = Classifier::zeroed_linear(2, 3);
        assert_eq!(fgsm(&z, &x, 0, 0.1).unwrap(), x);
    }

    #[test]
    fn fgsm_moves_along_positive_gradient_and_clips() {
        // Two classes, logits (w x, 0) with w > 0 and y = 1: increasing x
        // increases the loss, so the signed step is +epsilon.
        let m = Classifier::linear(2, 1, vec![3.0, 0.0], vec![0.0, 0.0]).unwrap();
        let out = fgsm(&m, &[0.5], 1, 0.1).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        let clipped = fgsm(&m, &[0.95], 1, 0.1).unwrap();
        assert_eq!(clipped[0], 1.0);
    }

    #[test]
    fn fgsm_never_decreases_loss_of_linear_models() {
        let mut rng = rng_from(33);
        for trial in 0..50 {
            let mut m = Classifier::zeroed_linear(3, 4);
            let n = m.params().len();
            let params: Vec<f64> = (0..n).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            m.set_params(&params).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let y = trial % 3;
            let x_adv = fgsm(&m, &x, y, 0.08).unwrap();
            use crate::model::Model;
            assert!(m.loss(&x_adv, y).unwrap() >= m.loss(&x, y).unwrap() - 1e-12);
        }
    }

    #[test]
    fn pgd_one_full_step_equals_fgsm() {
        let mut rng = rng_from(44);
        for trial in 0..50 {
            let m = random_mlp(3, 5, 6, 100 + trial);
            let x: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let y = (trial % 3) as usize;
            let eps = 0.07;
            let a = fgsm(&m, &x, y, eps).unwrap();
            let b = pgd(&m, &x, y, eps, eps, 1).unwrap();
            let c = pgd(&m, &x, y, eps, 0.2, 1).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn pgd_zero_budget_is_identity() {
        let m = random_mlp(2, 3, 4, 7);
        let x = vec![0.3, 0.8, 0.1];
        assert_eq!(pgd(&m, &x, 0, 0.0, 0.05, 10).unwrap(), x);
    }

    #[test]
    fn pgd_beats_fgsm_most_of_the_time() {
        use crate::model::Model;
        let mut rng = rng_from(55);
        let mut wins = 0;
        let trials = 100;
        for trial in 0..trials {
            let m = random_mlp(3, 4, 8, 200 + trial);
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let y = (trial % 3) as usize;
            let eps = 0.1;
            let f = fgsm(&m, &x, y, eps).unwrap();
            let p = pgd(&m, &x, y, eps, eps / 4.0, 10).unwrap();
            if m.loss(&p, y).unwrap() >= m.loss(&f, y).unwrap() - 1e-12 {
                wins += 1;
            }
        }
        assert!(wins >= 90, "pgd won only {wins} of {trials}");
    }

    #[test]
    fn spsa_constant_loss_stays_put() {
        let z = Classifier::zeroed_linear(2, 4);
        let x = vec![0.2, 0.4, 0.6, 0.8];
        let spec = AttackSpec::new(AttackKind::Spsa);
        assert_eq!(spsa(&z, &x, 0, &spec).unwrap(), x);
    }

    #[test]
    fn spsa_is_deterministic_given_seed() {
        let m = random_mlp(3, 4, 5, 9);
        let x = vec![0.3, 0.5, 0.7, 0.2];
        let mut spec = AttackSpec::new(AttackKind::Spsa);
        spec.seed = 42;
        let a = spsa(&m, &x, 1, &spec).unwrap();
        let b = spsa(&m, &x, 1, &spec).unwrap();
        assert_eq!(a, b);
        spec.seed = 43;
        assert_ne!(spsa(&m, &x, 1, &spec).unwrap(), a);
    }

    #[test]
    fn spsa_estimate_recovers_gradient_signs_on_linear_models() {
        use crate::model::Model;
        // Logit-difference rows of unit magnitude per coordinate keep every
        // gradient coordinate the same size, so the two-point estimator's
        // cross-term noise (sd = sqrt(d-1)/sqrt(samples) per coordinate)
        // flips essentially no signs at 64 samples.
        let mut rng = rng_from(66);
        let d = 8;
        let mut agree_sum = 0.0;
        let trials = 25;
        for trial in 0..trials {
            let signs: Vec<f64> = (0..d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let mut w = Vec::with_capacity(2 * d);
            w.extend(signs.iter().map(|s| s / 2.0));
            w.extend(signs.iter().map(|s| -s / 2.0));
            let m = Classifier::linear(2, d, w, vec![0.0, 0.0]).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let y = trial % 2;
            let reference = m.input_gradient(&x, y).unwrap();
            let mut spec = AttackSpec::new(AttackKind::Spsa);
            spec.spsa_samples = 64;
            spec.seed = 7000 + trial as u64;
            agree_sum += spsa_sign_agreement(&m, &x, y, &spec, &reference).unwrap();
        }
        let mean_agreement = agree_sum / trials as f64;
        assert!(mean_agreement >= 0.95, "sign agreement {mean_agreement}");
    }

    #[test]
    fn cw_with_zero_weight_returns_the_input() {
        let m = random_mlp(3, 4, 5, 21);
        let mut spec = AttackSpec::new(AttackKind::Cw);
        spec.cw_c = 0.0;
        for x in [vec![0.5, 0.5, 0.5, 0.5], vec![0.0, 1.0, 0.25, 0.75]] {
            let out = cw(&m, &x, 0, &spec).unwrap();
            assert!(linf(&out, &x) < 1e-3, "moved {} from input", linf(&out, &x));
        }
    }

    #[test]
    fn cw_rejects_zero_steps() {
        let m = random_mlp(2, 2, 3, 3);
        let mut spec = AttackSpec::new(AttackKind::Cw);
        spec.cw_steps = 0;
        assert!(matches!(
            cw(&m, &[0.5, 0.5], 0, &spec),
            Err(AttackError::InvalidSpec(_))
        ));
    }

    #[test]
    fn cw_reduces_the_margin_of_a_confident_model() {
        use crate::model::Model;
        // Confidently correct linear model for y = 0 at x = 0.7.
        let m = Classifier::linear(2, 1, vec![4.0, -4.0], vec![0.0, 0.0]).unwrap();
        let x = vec![0.7];
        let margin = |xs: &[f64]| {
            let z = m.logits(xs).unwrap();
            z[0] - z[1]
        };
        let mut spec = AttackSpec::new(AttackKind::Cw);
        spec.cw_c = 10.0;
        let adv = cw(&m, &x, 0, &spec).unwrap();
        assert!(
            margin(&adv) < margin(&x),
            "margin did not decrease: {} -> {}",
            margin(&x),
            margin(&adv)
        );
    }

    #[test]
    fn budgeted_attacks_respect_ball_and_box() {
        let mut rng = rng_from(88);
        for trial in 0..60u64 {
            let m = random_mlp(3, 4, 5, 300 + trial);
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let y = (trial % 3) as usize;
            let eps = 0.05 + 0.1 * rng.random::<f64>();
            for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Spsa] {
                let mut spec = AttackSpec::new(kind);
                spec.epsilon = eps;
                spec.seed = trial;
                let adv = apply_attack(&spec, &m, &x, y).unwrap();
                assert!(linf(&adv, &x) <= eps + 1e-12);
                assert!(adv.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn cw_clip_flag_enforces_the_ball() {
        let m = Classifier::linear(2, 2, vec![6.0, 6.0, -6.0, -6.0], vec![0.0, 0.0]).unwrap();
        let x = vec![0.8, 0.6];
        let mut spec = AttackSpec::new(AttackKind::Cw);
        spec.cw_c = 20.0;
        spec.cw_steps = 200;
        let unclipped = cw(&m, &x, 0, &spec).unwrap();
        assert!(linf(&unclipped, &x) > 0.05, "attack too weak to exercise the clip");
        spec.cw_clip_to_eps = true;
        spec.epsilon = 0.05;
        let clipped = cw(&m, &x, 0, &spec).unwrap();
        assert!(linf(&clipped, &x) <= 0.05 + 1e-12);
        assert!(clipped.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = random_mlp(2, 3, 4, 5);
        let spec = AttackSpec::new(AttackKind::Fgsm);
        assert!(matches!(
            apply_attack(&spec, &m, &[0.1, 0.2], 0),
            Err(AttackError::Model(ModelError::DimensionMismatch { .. }))
        ));
    }
}
