//! Split-conformal calibration and prediction sets.
//!
//! The calibration quantile is the ceil((n+1)(1-alpha))-th smallest
//! nonconformity score; when that rank exceeds n the threshold is +inf and
//! prediction sets are full, which keeps the coverage guarantee for tiny
//! calibration sets. Conservative calibration takes the maximum of the
//! per-attack quantiles over an attack set, so the resulting sets keep
//! coverage no matter which attack in the set actually occurs.

use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::attacks::{apply_attack, AttackError, AttackSpec};
use crate::model::Model;
use crate::rng::substream;
use crate::scores::{score, score_all_labels, ScoreError, ScoreSpec};

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error(transparent)]
    Score(#[from] ScoreError),

    #[error(transparent)]
    Attack(#[from] AttackError),

    #[error("no calibration scores")]
    EmptyScores,

    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),

    #[error("attack set is empty")]
    EmptyAttackSet,

    #[error("threshold is NaN")]
    InvalidThreshold,
}

/// The ceil((n+1)(1-alpha))-th smallest score, or +inf when the rank
/// exceeds n.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64, ConformalError> {
    if scores.is_empty() {
        return Err(ConformalError::EmptyScores);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    let n = scores.len();
    let raw = (n as f64 + 1.0) * (1.0 - alpha);
    // Snap to the nearest integer when within rounding error so that exact
    // ranks like 20 * 0.9 = 18 are not pushed up by one by ceil().
    let snapped = if (raw - raw.round()).abs() <= 1e-9 * raw.abs().max(1.0) {
        raw.round()
    } else {
        raw
    };
    let k = snapped.ceil() as usize;
    if k > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    Ok(sorted[k - 1])
}

/// Labels whose score is at or below the threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn from_labels(mut labels: Vec<usize>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        Self { labels }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn contains(&self, y: usize) -> bool {
        self.labels.binary_search(&y).is_ok()
    }
}

/// Score every label of `x` and keep those with score at or below `q`.
pub fn prediction_set(
    spec: &ScoreSpec,
    model: &dyn Model,
    x: &[f64],
    q: f64,
    stream: u64,
) -> Result<PredictionSet, ConformalError> {
    if q.is_nan() {
        return Err(ConformalError::InvalidThreshold);
    }
    let scores = score_all_labels(spec, model, x, stream)?;
    let labels = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= q)
        .map(|(y, _)| y)
        .collect();
    Ok(PredictionSet { labels })
}

/// Per-attack calibration thresholds for one defense, plus their maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub model_id: String,
    pub alpha: f64,
    #[serde(
        serialize_with = "serialize_q_map",
        deserialize_with = "deserialize_q_map"
    )]
    pub per_attack_q: BTreeMap<String, f64>,
    #[serde(serialize_with = "serialize_q", deserialize_with = "deserialize_q")]
    pub conservative_q: f64,
}

impl CalibrationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

// Thresholds may be +inf, which JSON numbers cannot express; encode that
// case as the string "inf".
fn serialize_q<S: Serializer>(q: &f64, ser: S) -> Result<S::Ok, S::Error> {
    if q.is_infinite() && *q > 0.0 {
        ser.serialize_str("inf")
    } else {
        ser.serialize_f64(*q)
    }
}

fn deserialize_q<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(de)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(s) if s == "inf" => Ok(f64::INFINITY),
        Raw::Text(s) => Err(D::Error::custom(format!("bad threshold {s:?}"))),
    }
}

fn serialize_q_map<S: Serializer>(map: &BTreeMap<String, f64>, ser: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut m = ser.serialize_map(Some(map.len()))?;
    for (k, v) in map {
        if v.is_infinite() && *v > 0.0 {
            m.serialize_entry(k, "inf")?;
        } else {
            m.serialize_entry(k, v)?;
        }
    }
    m.end()
}

fn deserialize_q_map<'de, D: Deserializer<'de>>(de: D) -> Result<BTreeMap<String, f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    let raw: BTreeMap<String, Raw> = BTreeMap::deserialize(de)?;
    raw.into_iter()
        .map(|(k, v)| match v {
            Raw::Num(n) => Ok((k, n)),
            Raw::Text(s) if s == "inf" => Ok((k, f64::INFINITY)),
            Raw::Text(s) => Err(D::Error::custom(format!("bad threshold {s:?}"))),
        })
        .collect()
}

/// Calibrate one defense under one known attack: attack every calibration
/// example against `attack_target`, score the attacked input at its true
/// label with the defense, and take the conformal quantile.
///
/// Per-example score sampling uses the `"cal"` stream keyed by the
/// example's dataset index, so calibration noise is independent of the
/// test-time stream.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_known_attack(
    defense: &dyn Model,
    attack: &AttackSpec,
    attack_target: &dyn Model,
    ds: &crate::dataio::Dataset,
    cal: &[usize],
    spec: &ScoreSpec,
    alpha: f64,
    seed: u64,
) -> Result<f64, ConformalError> {
    if cal.is_empty() {
        return Err(ConformalError::EmptyScores);
    }
    let resolved = spec.resolved_for(attack);
    let mut scores = Vec::with_capacity(cal.len());
    for &i in cal {
        let ex = ds.example(i);
        let attacked = apply_attack(attack, attack_target, &ex.features, ex.label)?;
        scores.push(score(
            &resolved,
            defense,
            &attacked,
            ex.label,
            substream(seed, "cal", i as u64),
        )?);
    }
    conformal_quantile(&scores, alpha)
}

/// Calibrate one defense across a whole attack set and keep the largest
/// per-attack threshold as the conservative one.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_conservative(
    model_id: &str,
    defense: &dyn Model,
    attacks: &[AttackSpec],
    attack_target: &dyn Model,
    ds: &crate::dataio::Dataset,
    cal: &[usize],
    spec: &ScoreSpec,
    alpha: f64,
    seed: u64,
) -> Result<CalibrationResult, ConformalError> {
    if attacks.is_empty() {
        return Err(ConformalError::EmptyAttackSet);
    }
    let mut per_attack_q = BTreeMap::new();
    let mut conservative_q = f64::NEG_INFINITY;
    for attack in attacks {
        let q = calibrate_known_attack(
            defense,
            attack,
            attack_target,
            ds,
            cal,
            spec,
            alpha,
            seed,
        )?;
        conservative_q = conservative_q.max(q);
        per_attack_q.insert(attack.id().to_string(), q);
    }
    Ok(CalibrationResult {
        model_id: model_id.to_string(),
        alpha,
        per_attack_q,
        conservative_q,
    })
}

/// Attack each indexed example against `attack_target`, score it with the
/// defense, and threshold at `q`. `stream_label` names the score-sampling
/// stream ("test" for held-out data, "eval" for payoff estimation).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pipeline(
    defense: &dyn Model,
    ds: &crate::dataio::Dataset,
    indices: &[usize],
    attack: &AttackSpec,
    attack_target: &dyn Model,
    spec: &ScoreSpec,
    q: f64,
    seed: u64,
    stream_label: &str,
) -> Result<Vec<PredictionSet>, ConformalError> {
    let resolved = spec.resolved_for(attack);
    let mut sets = Vec::with_capacity(indices.len());
    for &i in indices {
        let ex = ds.example(i);
        let attacked = apply_attack(attack, attack_target, &ex.features, ex.label)?;
        sets.push(prediction_set(
            &resolved,
            defense,
            &attacked,
            q,
            substream(seed, stream_label, i as u64),
        )?);
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackKind;
    use crate::dataio::generate_synthetic;
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

    #[test]
    fn quantile_rank_formula() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), 1.0);

        let scores: Vec<f64> = (1..=19).map(|i| i as f64).collect();
        // ceil(20 * 0.9) = 18, the 18th smallest.
        assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), 18.0);

        let scores = vec![0.3, 0.1, 0.2];
        assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), f64::INFINITY);
    }

    #[test]
    fn quantile_rejects_bad_inputs() {
        assert!(matches!(
            conformal_quantile(&[], 0.1),
            Err(ConformalError::EmptyScores)
        ));
        assert!(matches!(
            conformal_quantile(&[1.0], 0.0),
            Err(ConformalError::InvalidAlpha(_))
        ));
        assert!(matches!(
            conformal_quantile(&[1.0], 1.0),
            Err(ConformalError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn quantile_handles_ties_by_rank() {
        let scores = vec![0.5, 0.5, 0.5, 0.5];
        assert_eq!(conformal_quantile(&scores, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn prediction_set_thresholds() {
        let b: Vec<f64> = [0.7f64, 0.2, 0.1].iter().map(|p| p.ln()).collect();
        let m = Classifier::linear(3, 1, vec![0.0; 3], b).unwrap();
        let spec = ScoreSpec::thr();
        let x = [0.5];

        let full = prediction_set(&spec, &m, &x, f64::INFINITY, 0).unwrap();
        assert_eq!(full.labels(), &[0, 1, 2]);

        let empty = prediction_set(&spec, &m, &x, -2.0, 0).unwrap();
        assert_eq!(empty.size(), 0);

        let mid = prediction_set(&spec, &m, &x, -0.15, 0).unwrap();
        assert_eq!(mid.labels(), &[0, 1]);
    }

    #[test]
    fn prediction_set_is_monotone_in_q() {
        let m = random_mlp(4, 3, 5, 1);
        let x = vec![0.2, 0.8, 0.5];
        let spec = ScoreSpec::aps();
        let mut prev = Vec::new();
        for q in [0.0, 0.3, 0.6, 0.9, 1.0, f64::INFINITY] {
            let set = prediction_set(&spec, &m, &x, q, 3).unwrap();
            for y in &prev {
                assert!(set.contains(*y), "set shrank at q={q}");
            }
            prev = set.labels().to_vec();
        }
    }

    #[test]
    fn constant_scores_calibrate_to_that_constant() {
        let ds = generate_synthetic(2, 2, 20, 0.05, 1).unwrap();
        let cal: Vec<usize> = (0..20).collect();
        let f0 = Classifier::zeroed_linear(2, 2);
        let clean = AttackSpec::new(AttackKind::Clean);
        let q = calibrate_known_attack(&f0, &clean, &f0, &ds, &cal, &ScoreSpec::thr(), 0.1, 0)
            .unwrap();
        assert!((q - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn clean_calibration_equals_plain_split_conformal() {
        let ds = generate_synthetic(3, 2, 30, 0.1, 2).unwrap();
        let cal: Vec<usize> = (0..ds.len()).collect();
        let m = random_mlp(3, 2, 4, 9);
        let spec = ScoreSpec::thr();
        let clean = AttackSpec::new(AttackKind::Clean);
        let via_attack =
            calibrate_known_attack(&m, &clean, &m, &ds, &cal, &spec, 0.1, 7).unwrap();
        let mut scores = Vec::new();
        for &i in &cal {
            let ex = ds.example(i);
            scores.push(
                score(&spec, &m, &ex.features, ex.label, substream(7, "cal", i as u64)).unwrap(),
            );
        }
        assert_eq!(via_attack, conformal_quantile(&scores, 0.1).unwrap());
    }

    #[test]
    fn conservative_is_max_of_per_attack() {
        let ds = generate_synthetic(2, 3, 20, 0.08, 3).unwrap();
        let cal: Vec<usize> = (0..ds.len()).collect();
        let f0 = random_mlp(2, 3, 4, 4);
        let defense = random_mlp(2, 3, 4, 5);
        let spec = ScoreSpec::aps();

        let one = vec![AttackSpec::new(AttackKind::Fgsm)];
        let res1 =
            calibrate_conservative("d", &defense, &one, &f0, &ds, &cal, &spec, 0.1, 0).unwrap();
        assert_eq!(res1.conservative_q, res1.per_attack_q["fgsm"]);

        let two = vec![
            AttackSpec::new(AttackKind::Fgsm),
            AttackSpec::new(AttackKind::Pgd),
        ];
        let res2 =
            calibrate_conservative("d", &defense, &two, &f0, &ds, &cal, &spec, 0.1, 0).unwrap();
        assert!(res2.conservative_q >= res1.conservative_q);
        let max = res2
            .per_attack_q
            .values()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        assert_eq!(res2.conservative_q, max);
        for (id, q) in &res2.per_attack_q {
            assert!(res2.conservative_q >= *q, "{id}");
        }
    }

    #[test]
    fn empty_attack_set_is_an_error() {
        let ds = generate_synthetic(2, 2, 10, 0.05, 1).unwrap();
        let cal: Vec<usize> = (0..10).collect();
        let m = Classifier::zeroed_linear(2, 2);
        assert!(matches!(
            calibrate_conservative("d", &m, &[], &m, &ds, &cal, &ScoreSpec::thr(), 0.1, 0),
            Err(ConformalError::EmptyAttackSet)
        ));
    }

    #[test]
    fn infinite_threshold_gives_full_sets() {
        let ds = generate_synthetic(3, 2, 10, 0.05, 5).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let m = random_mlp(3, 2, 4, 6);
        let clean = AttackSpec::new(AttackKind::Clean);
        let sets = evaluate_pipeline(
            &m,
            &ds,
            &idx,
            &clean,
            &m,
            &ScoreSpec::aps(),
            f64::INFINITY,
            0,
            "test",
        )
        .unwrap();
        assert!(sets.iter().all(|s| s.size() == 3));
    }

    #[test]
    fn pipelines_are_deterministic() {
        let ds = generate_synthetic(2, 3, 16, 0.08, 8).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let f0 = random_mlp(2, 3, 4, 10);
        let mut attack = AttackSpec::new(AttackKind::Spsa);
        attack.seed = 3;
        let mut spec = ScoreSpec::new(crate::scores::ScoreKind::Rscp);
        spec.seed = 5;
        let a = evaluate_pipeline(&f0, &ds, &idx, &attack, &f0, &spec, -0.4, 1, "test").unwrap();
        let b = evaluate_pipeline(&f0, &ds, &idx, &attack, &f0, &spec, -0.4, 1, "test").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_result_json_encodes_infinity() {
        let mut per_attack_q = BTreeMap::new();
        per_attack_q.insert("clean".to_string(), 0.42);
        per_attack_q.insert("fgsm".to_string(), f64::INFINITY);
        let res = CalibrationResult {
            model_id: "normal".into(),
            alpha: 0.1,
            per_attack_q,
            conservative_q: f64::INFINITY,
        };
        let json = res.to_json();
        assert!(json.contains("\"inf\""));
        let back = CalibrationResult::from_json(&json).unwrap();
        assert_eq!(back, res);
    }
}
