//! Nonconformity scores.
//!
//! Smaller scores mean the label is more plausible for the input. Two base
//! scores are provided: the negative estimated probability (THR) and the
//! descending cumulative probability mass down to the candidate label
//! (APS). Three robust variants wrap a base score: RSCP averages it over
//! Gaussian-noised copies of the input, and the VRCP pair takes the
//! minimum (inclusive) or maximum (conservative) over uniform samples from
//! an infinity-norm ball.
//!
//! Sampling is driven by a per-example stream so results are independent
//! of evaluation order; the same samples are shared across labels.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::AttackSpec;
use crate::model::{Model, ModelError};
use crate::rng::rng_from;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Model(#[from] ModelError),

    #[error("invalid score spec: {0}")]
    InvalidSpec(String),

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },
}

/// Base nonconformity score applied to a probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseScore {
    Thr,
    Aps,
}

impl BaseScore {
    pub fn id(self) -> &'static str {
        match self {
            BaseScore::Thr => "thr",
            BaseScore::Aps => "aps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "thr" => Some(BaseScore::Thr),
            "aps" => Some(BaseScore::Aps),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Thr,
    Aps,
    Rscp,
    VrcpI,
    VrcpC,
}

impl ScoreKind {
    pub fn id(self) -> &'static str {
        match self {
            ScoreKind::Thr => "thr",
            ScoreKind::Aps => "aps",
            ScoreKind::Rscp => "rscp",
            ScoreKind::VrcpI => "vrcp-i",
            ScoreKind::VrcpC => "vrcp-c",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "thr" => Some(ScoreKind::Thr),
            "aps" => Some(ScoreKind::Aps),
            "rscp" => Some(ScoreKind::Rscp),
            "vrcp-i" | "vrcp_i" => Some(ScoreKind::VrcpI),
            "vrcp-c" | "vrcp_c" => Some(ScoreKind::VrcpC),
            _ => None,
        }
    }
}

/// Full score configuration.
///
/// `vrcp_epsilon = None` means "use the budget of the attack under
/// evaluation"; resolve it with [`ScoreSpec::resolved_for`] before scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    pub base: BaseScore,
    pub sigma: f64,
    pub n_noise: usize,
    pub vrcp_epsilon: Option<f64>,
    pub n_perturb: usize,
    pub include_clean_copy: bool,
    pub seed: u64,
}

impl ScoreSpec {
    pub fn new(kind: ScoreKind) -> Self {
        let base = match kind {
            ScoreKind::Thr => BaseScore::Thr,
            _ => BaseScore::Aps,
        };
        Self {
            kind,
            base,
            sigma: 0.05,
            n_noise: 32,
            vrcp_epsilon: None,
            n_perturb: 16,
            include_clean_copy: true,
            seed: 0,
        }
    }

    pub fn thr() -> Self {
        Self::new(ScoreKind::Thr)
    }

    pub fn aps() -> Self {
        Self::new(ScoreKind::Aps)
    }

    /// Fill an unset VRCP radius from the attack under evaluation.
    pub fn resolved_for(&self, attack: &AttackSpec) -> Self {
        let mut spec = self.clone();
        if spec.vrcp_epsilon.is_none() {
            spec.vrcp_epsilon = Some(attack.epsilon);
        }
        spec
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        match self.kind {
            ScoreKind::Thr | ScoreKind::Aps => Ok(()),
            ScoreKind::Rscp => {
                if !(self.sigma > 0.0) {
                    return Err(ScoreError::InvalidSpec(format!(
                        "sigma must be positive, got {}",
                        self.sigma
                    )));
                }
                if self.n_noise < 1 {
                    return Err(ScoreError::InvalidSpec("n_noise must be >= 1".into()));
                }
                Ok(())
            }
            ScoreKind::VrcpI | ScoreKind::VrcpC => {
                match self.vrcp_epsilon {
                    None => {
                        return Err(ScoreError::InvalidSpec(
                            "vrcp_epsilon is unresolved; call resolved_for with the attack under evaluation".into(),
                        ))
                    }
                    Some(e) if !(e >= 0.0) => {
                        return Err(ScoreError::InvalidSpec(format!(
                            "vrcp_epsilon must be nonnegative, got {e}"
                        )))
                    }
                    Some(_) => {}
                }
                if self.n_perturb < 1 {
                    return Err(ScoreError::InvalidSpec("n_perturb must be >= 1".into()));
                }
                Ok(())
            }
        }
    }
}

/// Negative estimated probability of the candidate label.
pub fn thr_from_probs(probs: &[f64], y: usize) -> f64 {
    -probs[y]
}

/// Cumulative probability over labels at least as probable as the
/// candidate, summed in ascending label order. Probability ties are broken
/// by label index, so the score is deterministic (no randomization term).
pub fn aps_from_probs(probs: &[f64], y: usize) -> f64 {
    let py = probs[y];
    let mut total = 0.0;
    for (label, &p) in probs.iter().enumerate() {
        if p > py || (p == py && label <= y) {
            total += p;
        }
    }
    total
}

fn base_score(base: BaseScore, probs: &[f64], y: usize) -> f64 {
    match base {
        BaseScore::Thr => thr_from_probs(probs, y),
        BaseScore::Aps => aps_from_probs(probs, y),
    }
}

impl ScoreSpec {
    /// The base score actually applied: the plain kinds are their own
    /// base; `base` configures the robust wrappers only.
    fn effective_base(&self) -> BaseScore {
        match self.kind {
            ScoreKind::Thr => BaseScore::Thr,
            ScoreKind::Aps => BaseScore::Aps,
            _ => self.base,
        }
    }
}

/// The perturbed (or noised) copies of `x` that a spec scores over. One
/// draw per input; every label sees the same copies.
fn sample_inputs(spec: &ScoreSpec, x: &[f64], stream: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from(crate::rng::substream(spec.seed, "score", stream));
    match spec.kind {
        ScoreKind::Thr | ScoreKind::Aps => vec![x.to_vec()],
        ScoreKind::Rscp => (0..spec.n_noise)
            .map(|_| {
                x.iter()
                    .map(|&xi| {
                        let z: f64 = rng.sample(StandardNormal);
                        (xi + spec.sigma * z).clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect(),
        ScoreKind::VrcpI | ScoreKind::VrcpC => {
            let radius = spec.vrcp_epsilon.expect("validated");
            let mut samples = Vec::with_capacity(spec.n_perturb + 1);
            if spec.include_clean_copy {
                samples.push(x.to_vec());
            }
            // Sequential draws keep sample sets nested across n_perturb.
            for _ in 0..spec.n_perturb {
                samples.push(
                    x.iter()
                        .map(|&xi| {
                            let u = rng.random::<f64>();
                            (xi + radius * (2.0 * u - 1.0)).clamp(0.0, 1.0)
                        })
                        .collect(),
                );
            }
            samples
        }
    }
}

/// Score every label of `x` at once. Entry `y` equals
/// `score(spec, model, x, y, stream)`.
pub fn score_all_labels(
    spec: &ScoreSpec,
    model: &dyn Model,
    x: &[f64],
    stream: u64,
) -> Result<Vec<f64>, ScoreError> {
    spec.validate()?;
    let c = model.num_classes();
    let samples = sample_inputs(spec, x, stream);
    let base = spec.effective_base();
    let mut out = vec![0.0; c];
    match spec.kind {
        ScoreKind::Thr | ScoreKind::Aps => {
            let probs = model.probabilities(&samples[0])?;
            for (y, slot) in out.iter_mut().enumerate() {
                *slot = base_score(base, &probs, y);
            }
        }
        ScoreKind::Rscp => {
            for sample in &samples {
                let probs = model.probabilities(sample)?;
                for (y, slot) in out.iter_mut().enumerate() {
                    *slot += base_score(base, &probs, y);
                }
            }
            for slot in &mut out {
                *slot /= samples.len() as f64;
            }
        }
        ScoreKind::VrcpI | ScoreKind::VrcpC => {
            let mut first = true;
            for sample in &samples {
                let probs = model.probabilities(sample)?;
                for (y, slot) in out.iter_mut().enumerate() {
                    let s = base_score(base, &probs, y);
                    if first {
                        *slot = s;
                    } else {
                        *slot = match spec.kind {
                            ScoreKind::VrcpI => slot.min(s),
                            _ => slot.max(s),
                        };
                    }
                }
                first = false;
            }
        }
    }
    Ok(out)
}

/// Nonconformity score of one (input, label) pair.
pub fn score(
    spec: &ScoreSpec,
    model: &dyn Model,
    x: &[f64],
    y: usize,
    stream: u64,
) -> Result<f64, ScoreError> {
    let c = model.num_classes();
    if y >= c {
        return Err(ScoreError::InvalidLabel {
            label: y,
            num_classes: c,
        });
    }
    Ok(score_all_labels(spec, model, x, stream)?[y])
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

    /// Linear model whose probabilities at any input are exactly softmax of
    /// ln(p): useful for pinning probability vectors in tests.
    fn model_with_probs(probs: &[f64]) -> Classifier {
        let c = probs.len();
        let b: Vec<f64> = probs.iter().map(|&p| p.ln()).collect();
        Classifier::linear(c, 1, vec![0.0; c], b).unwrap()
    }

    #[test]
    fn thr_is_negative_probability() {
        assert_eq!(thr_from_probs(&[0.7, 0.2, 0.1], 0), -0.7);
        let m = model_with_probs(&[0.7, 0.2, 0.1]);
        let spec = ScoreSpec::thr();
        let v = score(&spec, &m, &[0.5], 0, 0).unwrap();
        assert!((v + 0.7).abs() < 1e-12);
        let all = score_all_labels(&spec, &m, &[0.5], 0).unwrap();
        let probs = crate::model::Model::probabilities(&m, &[0.5]).unwrap();
        for y in 0..3 {
            assert_eq!(all[y], -probs[y]);
        }
    }

    #[test]
    fn aps_is_descending_cumulative() {
        let probs = [0.7, 0.2, 0.1];
        assert_eq!(aps_from_probs(&probs, 0), 0.7);
        assert_eq!(aps_from_probs(&probs, 1), 0.7 + 0.2);
        assert_eq!(aps_from_probs(&probs, 2), 0.7 + 0.2 + 0.1);
    }

    #[test]
    fn aps_breaks_ties_by_label_index() {
        let probs = [0.25, 0.25, 0.5];
        assert_eq!(aps_from_probs(&probs, 0), 0.5 + 0.25);
        assert_eq!(aps_from_probs(&probs, 1), 0.5 + 0.25 + 0.25);
    }

    #[test]
    fn aps_reaches_one_at_least_probable_label() {
        let m = random_mlp(4, 3, 5, 1);
        let x = vec![0.2, 0.6, 0.4];
        let all = score_all_labels(&ScoreSpec::aps(), &m, &x, 0).unwrap();
        let max = all.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        assert!((max - 1.0).abs() < 1e-9);
        for &s in &all {
            assert!(s > 0.0 && s <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn scores_are_monotone_in_probability() {
        let m = random_mlp(5, 3, 6, 2);
        let x = vec![0.1, 0.9, 0.4];
        let probs = crate::model::Model::probabilities(&m, &x).unwrap();
        for spec in [ScoreSpec::thr(), ScoreSpec::aps()] {
            let all = score_all_labels(&spec, &m, &x, 0).unwrap();
            for a in 0..5 {
                for b in 0..5 {
                    if probs[a] > probs[b] {
                        assert!(all[a] < all[b], "{spec:?}: {} !< {}", all[a], all[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn rscp_matches_base_at_vanishing_noise() {
        let m = random_mlp(3, 4, 6, 3);
        let mut rng = rng_from(50);
        for trial in 0..20u64 {
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            for base in [BaseScore::Thr, BaseScore::Aps] {
                let mut rscp = ScoreSpec::new(ScoreKind::Rscp);
                rscp.base = base;
                rscp.sigma = 1e-8;
                rscp.seed = trial;
                let base_spec = match base {
                    BaseScore::Thr => ScoreSpec::thr(),
                    BaseScore::Aps => ScoreSpec::aps(),
                };
                let a = score(&rscp, &m, &x, 1, trial).unwrap();
                let b = score(&base_spec, &m, &x, 1, trial).unwrap();
                assert!((a - b).abs() < 1e-6, "{base:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn vrcp_sandwiches_the_base_score() {
        let m = random_mlp(3, 4, 6, 4);
        let mut rng = rng_from(60);
        for trial in 0..20u64 {
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let mut lo = ScoreSpec::new(ScoreKind::VrcpI);
            lo.vrcp_epsilon = Some(0.1);
            lo.seed = trial;
            let mut hi = lo.clone();
            hi.kind = ScoreKind::VrcpC;
            let base = ScoreSpec::aps();
            for y in 0..3 {
                let i = score(&lo, &m, &x, y, trial).unwrap();
                let c = score(&hi, &m, &x, y, trial).unwrap();
                let b = score(&base, &m, &x, y, trial).unwrap();
                assert!(i <= b && b <= c, "violated: {i} <= {b} <= {c}");
            }
        }
    }

    #[test]
    fn vrcp_bounds_tighten_with_more_samples() {
        let m = random_mlp(3, 4, 6, 5);
        let x = vec![0.3, 0.7, 0.2, 0.5];
        for kind in [ScoreKind::VrcpI, ScoreKind::VrcpC] {
            let mut prev: Option<f64> = None;
            for n in [1usize, 2, 4, 8, 16] {
                let mut spec = ScoreSpec::new(kind);
                spec.vrcp_epsilon = Some(0.15);
                spec.n_perturb = n;
                spec.seed = 9;
                let s = score(&spec, &m, &x, 1, 77).unwrap();
                if let Some(p) = prev {
                    match kind {
                        ScoreKind::VrcpI => assert!(s <= p + 1e-15),
                        _ => assert!(s >= p - 1e-15),
                    }
                }
                prev = Some(s);
            }
        }
    }

    #[test]
    fn scoring_is_deterministic_per_stream() {
        let m = random_mlp(3, 4, 6, 6);
        let x = vec![0.1, 0.2, 0.3, 0.4];
        let mut spec = ScoreSpec::new(ScoreKind::Rscp);
        spec.seed = 4;
        let a = score_all_labels(&spec, &m, &x, 11).unwrap();
        let b = score_all_labels(&spec, &m, &x, 11).unwrap();
        assert_eq!(a, b);
        let c = score_all_labels(&spec, &m, &x, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unresolved_vrcp_radius_is_an_error() {
        let m = random_mlp(2, 2, 3, 7);
        let spec = ScoreSpec::new(ScoreKind::VrcpI);
        assert!(matches!(
            score(&spec, &m, &[0.5, 0.5], 0, 0),
            Err(ScoreError::InvalidSpec(_))
        ));
        let mut attack = AttackSpec::new(crate::attacks::AttackKind::Fgsm);
        attack.epsilon = 0.2;
        let resolved = spec.resolved_for(&attack);
        assert_eq!(resolved.vrcp_epsilon, Some(0.2));
        assert!(score(&resolved, &m, &[0.5, 0.5], 0, 0).is_ok());
    }

    #[test]
    fn plain_kinds_ignore_the_wrapper_base() {
        // base configures the robust wrappers; kind=thr must score as thr
        // even when base says otherwise (the config default is aps).
        let m = random_mlp(3, 2, 4, 9);
        let x = [0.4, 0.7];
        let mut spec = ScoreSpec::thr();
        spec.base = BaseScore::Aps;
        let got = score_all_labels(&spec, &m, &x, 0).unwrap();
        let probs = crate::model::Model::probabilities(&m, &x).unwrap();
        for y in 0..3 {
            assert_eq!(got[y], -probs[y]);
        }
    }

    #[test]
    fn invalid_label_is_rejected() {
        let m = random_mlp(3, 2, 3, 8);
        assert!(matches!(
            score(&ScoreSpec::thr(), &m, &[0.5, 0.5], 3, 0),
            Err(ScoreError::InvalidLabel { label: 3, num_classes: 3 })
        ));
    }
}
