//! Exchangeability of the single-split calibration/test path used by the
//! game pipeline, under the harshest attack.
//!
//! A single split's coverage is a noisy draw (roughly Beta around
//! ceil((n+1)(1-alpha))/(n+1)), so this checks the mean across seeds
//! rather than any one run.

use advcp::attacks::{apply_attack, AttackKind, AttackSpec};
use advcp::conformal::conformal_quantile;
use advcp::dataio::{generate_synthetic, stratified_split, SplitMode};
use advcp::model::{train, TrainConfig};
use advcp::rng::{mix, substream};
use advcp::scores::{score, ScoreSpec};

#[test]
fn single_split_coverage_is_marginally_valid_under_attack() {
    let mut coverages = Vec::new();
    for seed in 0..50u64 {
        let ds = generate_synthetic(3, 4, 150, 0.07, substream(seed, "data", 0)).unwrap();
        let base = stratified_split(&ds, SplitMode::Rq3, seed).unwrap();
        let tc = TrainConfig {
            epochs: 60,
            hidden: 16,
            seed: mix(seed, "train:normal"),
            ..TrainConfig::default()
        };
        let f0 = train(&ds, &base.train, None, None, &tc).unwrap();
        let mut attack = AttackSpec::new(AttackKind::Cw);
        attack.seed = mix(seed, "attack:cw");
        let spec = ScoreSpec::aps();

        let mut cal_scores = Vec::with_capacity(base.cal.len());
        for &i in &base.cal {
            let e = ds.example(i);
            let adv = apply_attack(&attack, &f0, &e.features, e.label).unwrap();
            cal_scores
                .push(score(&spec, &f0, &adv, e.label, substream(seed, "cal", i as u64)).unwrap());
        }
        let q = conformal_quantile(&cal_scores, 0.1).unwrap();

        let mut covered = 0usize;
        for &i in &base.test {
            let e = ds.example(i);
            let adv = apply_attack(&attack, &f0, &e.features, e.label).unwrap();
            let s = score(&spec, &f0, &adv, e.label, substream(seed, "test", i as u64)).unwrap();
            if s <= q {
                covered += 1;
            }
        }
        coverages.push(covered as f64 / base.test.len() as f64);
    }
    let mean = coverages.iter().sum::<f64>() / coverages.len() as f64;
    let sd = (coverages
        .iter()
        .map(|c| (c - mean) * (c - mean))
        .sum::<f64>()
        / (coverages.len() as f64 - 1.0))
        .sqrt();
    let se = sd / (coverages.len() as f64).sqrt();
    // n_cal = 45 here, so the theoretical mean is 42/46 ~ 0.913.
    assert!(
        mean >= 0.9 - 2.0 * se,
        "mean single-split coverage {mean:.4} (se {se:.4}) below the guarantee"
    );
    println!("mean single-split coverage over 50 seeds: {mean:.4} (se {se:.4})");
}
