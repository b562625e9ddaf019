//! End-to-end pipelines behind the CLI subcommands.
//!
//! A run is a pure function of (config, seed): data, splits, training,
//! attacks, scoring, and strategy draws all derive their randomness from
//! named substreams of the single config seed, and output files are
//! written atomically after all cells are computed, so re-running a
//! command reproduces its reports byte for byte.
//!
//! Trained models and the attacked pool depend only on the base split, so
//! replications re-split just the calibration/evaluation/test pool and
//! reuse cached per-example scores.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::attacks::AttackSpec;
use crate::config::{AttackTarget, ConfigError, DataSource, DefenseKind, RunConfig};
use crate::conformal::{
    calibrate_conservative, conformal_quantile, CalibrationResult, ConformalError, PredictionSet,
};
use crate::dataio::{
    generate_synthetic, read_dataset, split_pool, stratified_split, write_dataset, write_split,
    DataError, Dataset, SplitIndices, SplitMode,
};
use crate::game::{
    build_payoff, evaluate_strategy, pure_strategy, solve_zero_sum, uniform_strategy, DefenseRef,
    GameError, MixedStrategy, PayoffMatrix,
};
use crate::metrics::{self, singleton_strata, MetricsError};
use crate::model::{
    load_model, save_model, train, AggregateClassifier, AggregateMode, Classifier, Model,
    ModelError, TrainError,
};
use crate::rng::{mix, substream};
use crate::scores::{score_all_labels, ScoreError, ScoreSpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("model file {path}: {source}")]
    ModelFile {
        path: String,
        #[source]
        source: ModelError,
    },

    #[error(transparent)]
    Train(#[from] TrainError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Conformal(#[from] ConformalError),

    #[error(transparent)]
    Score(#[from] ScoreError),

    #[error(transparent)]
    Game(#[from] GameError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    /// CLI exit code: 2 for config errors, 3 for data/format errors,
    /// 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_)
            | PipelineError::ModelFile { .. }
            | PipelineError::Io { .. } => 3,
            PipelineError::Game(GameError::Format { .. })
            | PipelineError::Game(GameError::Io { .. }) => 3,
            _ => 1,
        }
    }
}

/// A defense as the pipelines evaluate it: either one trained classifier
/// or a logit aggregate over the trained members.
#[derive(Debug, Clone)]
pub enum DefenseModel {
    Single(Classifier),
    Aggregate(AggregateClassifier),
}

impl DefenseModel {
    pub fn as_model(&self) -> &dyn Model {
        match self {
            DefenseModel::Single(m) => m,
            DefenseModel::Aggregate(m) => m,
        }
    }
}

/// Data, splits, the pre-trained model, and the defense roster for a run.
pub struct Experiment {
    pub ds: Dataset,
    pub base: SplitIndices,
    pub pool: Vec<usize>,
    pub f0: Classifier,
    pub defenses: Vec<(String, DefenseModel)>,
    pub attacks: Vec<AttackSpec>,
    pub score: ScoreSpec,
}

fn load_model_file(path: &Path) -> Result<Classifier, PipelineError> {
    load_model(path).map_err(|e| PipelineError::ModelFile {
        path: path.display().to_string(),
        source: e,
    })
}

fn build_dataset(cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    Ok(match &cfg.data {
        DataSource::Synthetic {
            num_classes,
            dim,
            per_class,
            spread,
        } => generate_synthetic(
            *num_classes,
            *dim,
            *per_class,
            *spread,
            substream(cfg.seed, "data", 0),
        )?,
        DataSource::File(path) => read_dataset(path)?,
    })
}

/// Attack specs with seeds filled in from the run seed.
fn seeded_attacks(cfg: &RunConfig) -> Vec<AttackSpec> {
    cfg.attacks
        .iter()
        .map(|a| {
            let mut spec = a.clone();
            spec.seed = mix(cfg.seed, &format!("attack:{}", spec.id()));
            spec
        })
        .collect()
}

fn seeded_score(cfg: &RunConfig) -> ScoreSpec {
    let mut spec = cfg.score.clone();
    spec.seed = mix(cfg.seed, "score");
    spec
}

/// Build or load every model the run needs and assemble the defense
/// roster in config order.
pub fn prepare(cfg: &RunConfig, mode: SplitMode) -> Result<Experiment, PipelineError> {
    cfg.validate()?;
    let ds = build_dataset(cfg)?;
    let base = stratified_split(&ds, mode, cfg.seed)?;
    let attacks = seeded_attacks(cfg);
    let score = seeded_score(cfg);

    // The pre-trained model always exists: it is both the "normal" defense
    // and the target every attack is generated against.
    let f0 = match &cfg.models_dir {
        Some(dir) => load_model_file(&dir.join("normal.json"))?,
        None => {
            let mut tc = cfg.train.clone();
            tc.seed = mix(cfg.seed, "train:normal");
            train(&ds, &base.train, None, None, &tc)?
        }
    };
    if f0.dim() != ds.dim() || f0.num_classes() != ds.num_classes() {
        return Err(PipelineError::Invalid(format!(
            "model 'normal' has shape ({}, {}) but the data needs ({}, {})",
            f0.num_classes(),
            f0.dim(),
            ds.num_classes(),
            ds.dim()
        )));
    }

    let mut trained: BTreeMap<String, Classifier> = BTreeMap::new();
    let mut members: Vec<Classifier> = Vec::new();
    for kind in &cfg.defenses {
        if let DefenseKind::Trained(attack_kind) = kind {
            let id = kind.id();
            if trained.contains_key(&id) {
                continue;
            }
            let model = match &cfg.models_dir {
                Some(dir) => load_model_file(&dir.join(format!("{id}.json")))?,
                None => {
                    let spec = attacks
                        .iter()
                        .find(|a| a.kind == *attack_kind)
                        .cloned()
                        .unwrap_or_else(|| {
                            let mut s = AttackSpec::new(*attack_kind);
                            s.seed = mix(cfg.seed, &format!("attack:{id}"));
                            s
                        });
                    let mut tc = cfg.train.clone();
                    tc.seed = mix(cfg.seed, &format!("train:{id}"));
                    train(&ds, &base.train, Some(&spec), Some(&f0), &tc)?
                }
            };
            members.push(model.clone());
            trained.insert(id, model);
        }
    }

    let mut defenses = Vec::with_capacity(cfg.defenses.len());
    for kind in &cfg.defenses {
        let id = kind.id();
        if defenses.iter().any(|(existing, _)| *existing == id) {
            continue;
        }
        let model = match kind {
            DefenseKind::Normal => DefenseModel::Single(f0.clone()),
            DefenseKind::Trained(_) => DefenseModel::Single(trained[&id].clone()),
            DefenseKind::Max => DefenseModel::Aggregate(AggregateClassifier::new(
                members.clone(),
                AggregateMode::Max,
            )?),
            DefenseKind::Min => DefenseModel::Aggregate(AggregateClassifier::new(
                members.clone(),
                AggregateMode::Min,
            )?),
        };
        defenses.push((id, model));
    }

    Ok(Experiment {
        ds,
        base,
        pool: Vec::new(),
        f0,
        defenses,
        attacks,
        score,
    }
    .with_pool())
}

impl Experiment {
    fn with_pool(mut self) -> Self {
        self.pool = self.base.pool();
        self
    }

    /// The model calibration attacks are generated against for a defense,
    /// under the configured reading.
    fn calibration_target<'a>(&'a self, target: AttackTarget, defense: &'a dyn Model) -> &'a dyn Model {
        match target {
            AttackTarget::Pretrained => &self.f0,
            AttackTarget::Defense => defense,
        }
    }
}

fn atomic_write(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::Io {
                path: parent.display().to_string(),
                source: e,
            })?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|e| PipelineError::Io {
        path: tmp.display().to_string(),
        source: e,
    })?;
    std::fs::rename(&tmp, path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Generate the configured synthetic dataset and write it out.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    cfg.validate()?;
    if matches!(cfg.data, DataSource::File(_)) {
        return Err(PipelineError::Config(ConfigError::Invalid(
            "gen-data needs synthetic data parameters, not data.path".into(),
        )));
    }
    let ds = build_dataset(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| PipelineError::Io {
        path: cfg.out_dir.display().to_string(),
        source: e,
    })?;
    let path = cfg.out_dir.join("dataset.csv");
    write_dataset(&ds, &path)?;
    Ok(vec![path])
}

/// Train the pre-trained model and every attack-trained defense, then
/// write the model files and the base split.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let mode = cfg.split_mode.unwrap_or(SplitMode::Rq12);
    let ex = prepare(cfg, mode)?;
    let models_dir = cfg.out_dir.join("models");
    std::fs::create_dir_all(&models_dir).map_err(|e| PipelineError::Io {
        path: models_dir.display().to_string(),
        source: e,
    })?;
    let mut files = Vec::new();
    let path = models_dir.join("normal.json");
    save_model(&ex.f0, &path)?;
    files.push(path);
    for (id, model) in &ex.defenses {
        if let DefenseModel::Single(m) = model {
            if id != "normal" {
                let path = models_dir.join(format!("{id}.json"));
                save_model(m, &path)?;
                files.push(path);
            }
        }
    }
    let split_path = cfg.out_dir.join("split.json");
    write_split(&ex.base, &split_path)?;
    files.push(split_path);
    Ok(files)
}

/// One row of an rq1/rq2 report: metric means and standard deviations
/// across replications for a (defense, attack) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub defense: String,
    pub attack: String,
    pub score_kind: String,
    pub coverage_mean: f64,
    pub coverage_sd: f64,
    pub size_mean: f64,
    pub size_sd: f64,
    pub sscv_mean: f64,
    pub sscv_sd: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "defense,attack,score_kind,coverage_mean,coverage_sd,size_mean,size_sd,sscv_mean,sscv_sd\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.defense,
            r.attack,
            r.score_kind,
            r.coverage_mean,
            r.coverage_sd,
            r.size_mean,
            r.size_sd,
            r.sscv_mean,
            r.sscv_sd
        ));
    }
    out
}

/// Per-example score caches over the pool. Scores depend only on the
/// example and its stream role, never on which replication drew it, so
/// they are computed once and indexed by pool position.
struct ScoreCache {
    /// [defense][attack][pool position] -> score of the true label under
    /// the calibration stream.
    cal_true: Vec<Vec<Vec<f64>>>,
    /// [defense][attack][pool position][label] -> score under the test
    /// stream.
    test_all: Vec<Vec<Vec<Vec<f64>>>>,
    labels: Vec<usize>,
}

fn build_score_cache(
    ex: &Experiment,
    target: AttackTarget,
    seed: u64,
) -> Result<ScoreCache, PipelineError> {
    let pool = &ex.pool;
    let labels: Vec<usize> = pool.iter().map(|&i| ex.ds.example(i).label).collect();

    // Attacked inputs against the pre-trained model, shared by the test
    // side (and the calibration side under the default reading).
    let mut attacked_f0: Vec<Vec<Vec<f64>>> = Vec::with_capacity(ex.attacks.len());
    for attack in &ex.attacks {
        let mut col = Vec::with_capacity(pool.len());
        for &i in pool {
            let e = ex.ds.example(i);
            col.push(
                crate::attacks::apply_attack(attack, &ex.f0, &e.features, e.label)
                    .map_err(ConformalError::from)?,
            );
        }
        attacked_f0.push(col);
    }

    let mut cal_true = Vec::with_capacity(ex.defenses.len());
    let mut test_all = Vec::with_capacity(ex.defenses.len());
    for (_, defense) in &ex.defenses {
        let model = defense.as_model();

        // Calibration-side attacked inputs move with the flag.
        let attacked_cal: Vec<Vec<Vec<f64>>> = match target {
            AttackTarget::Pretrained => Vec::new(),
            AttackTarget::Defense => {
                let mut per_attack = Vec::with_capacity(ex.attacks.len());
                for attack in &ex.attacks {
                    let mut col = Vec::with_capacity(pool.len());
                    for &i in pool {
                        let e = ex.ds.example(i);
                        col.push(
                            crate::attacks::apply_attack(attack, model, &e.features, e.label)
                                .map_err(ConformalError::from)?,
                        );
                    }
                    per_attack.push(col);
                }
                per_attack
            }
        };

        let mut cal_rows = Vec::with_capacity(ex.attacks.len());
        let mut test_rows = Vec::with_capacity(ex.attacks.len());
        for (j, attack) in ex.attacks.iter().enumerate() {
            let resolved = ex.score.resolved_for(attack);
            let mut cal_scores = Vec::with_capacity(pool.len());
            let mut test_scores = Vec::with_capacity(pool.len());
            for (pos, &i) in pool.iter().enumerate() {
                let cal_input = match target {
                    AttackTarget::Pretrained => &attacked_f0[j][pos],
                    AttackTarget::Defense => &attacked_cal[j][pos],
                };
                let cal_all =
                    score_all_labels(&resolved, model, cal_input, substream(seed, "cal", i as u64))?;
                cal_scores.push(cal_all[labels[pos]]);
                test_scores.push(score_all_labels(
                    &resolved,
                    model,
                    &attacked_f0[j][pos],
                    substream(seed, "test", i as u64),
                )?);
            }
            cal_rows.push(cal_scores);
            test_rows.push(test_scores);
        }
        cal_true.push(cal_rows);
        test_all.push(test_rows);
    }
    Ok(ScoreCache {
        cal_true,
        test_all,
        labels,
    })
}

fn positions(pool: &[usize], subset: &[usize]) -> Vec<usize> {
    subset
        .iter()
        .map(|i| pool.binary_search(i).expect("subset index must be in the pool"))
        .collect()
}

fn sets_from_cache(
    scores: &[Vec<f64>],
    test_pos: &[usize],
    q: f64,
) -> Vec<PredictionSet> {
    test_pos
        .iter()
        .map(|&pos| {
            PredictionSet::from_labels(
                scores[pos]
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s <= q)
                    .map(|(y, _)| y)
                    .collect(),
            )
        })
        .collect()
}

struct CellStats {
    coverage: Vec<f64>,
    size: Vec<f64>,
    sscv: Vec<f64>,
}

impl CellStats {
    fn new() -> Self {
        Self {
            coverage: Vec::new(),
            size: Vec::new(),
            sscv: Vec::new(),
        }
    }

    fn push(
        &mut self,
        sets: &[PredictionSet],
        labels: &[usize],
        alpha: f64,
        num_classes: usize,
    ) -> Result<(), PipelineError> {
        let strata = singleton_strata(num_classes);
        self.coverage.push(metrics::coverage(sets, labels)?);
        self.size.push(metrics::mean_size(sets)?);
        self.sscv.push(
            metrics::sscv(sets, labels, alpha, &strata, num_classes)?.unwrap_or(f64::NAN),
        );
        Ok(())
    }

    fn row(&self, defense: &str, attack: &str, score_kind: &str) -> ReportRow {
        let (coverage_mean, coverage_sd) = mean_sd(&self.coverage);
        let (size_mean, size_sd) = mean_sd(&self.size);
        let (sscv_mean, sscv_sd) = mean_sd(&self.sscv);
        ReportRow {
            defense: defense.into(),
            attack: attack.into(),
            score_kind: score_kind.into(),
            coverage_mean,
            coverage_sd,
            size_mean,
            size_sd,
            sscv_mean,
            sscv_sd,
        }
    }
}

/// Which threshold each cell uses: its own attack's quantile (known
/// attack) or the max across the whole attack set (conservative).
#[derive(Clone, Copy, PartialEq, Eq)]
enum ThresholdRule {
    PerAttack,
    Conservative,
}

fn run_replicated(
    cfg: &RunConfig,
    rule: ThresholdRule,
) -> Result<(Vec<ReportRow>, BTreeMap<String, CalibrationResult>), PipelineError> {
    let mode = cfg.split_mode.unwrap_or(SplitMode::Rq12);
    let ex = prepare(cfg, mode)?;
    let cache = build_score_cache(&ex, cfg.attack_target, cfg.seed)?;
    let num_classes = ex.ds.num_classes();
    let score_kind = ex.score.kind.id();

    let mut cells: Vec<Vec<CellStats>> = (0..ex.defenses.len())
        .map(|_| (0..ex.attacks.len()).map(|_| CellStats::new()).collect())
        .collect();
    let mut calibrations = BTreeMap::new();

    for rep in 0..cfg.replications {
        let ps = split_pool(&ex.ds, &ex.pool, mode, substream(cfg.seed, "resplit", rep as u64));
        let cal_pos = positions(&ex.pool, &ps.cal);
        let test_pos = positions(&ex.pool, &ps.test);
        let test_labels: Vec<usize> = test_pos.iter().map(|&p| cache.labels[p]).collect();

        for (k, (id, _)) in ex.defenses.iter().enumerate() {
            let per_attack_q: Vec<f64> = (0..ex.attacks.len())
                .map(|j| {
                    let scores: Vec<f64> =
                        cal_pos.iter().map(|&p| cache.cal_true[k][j][p]).collect();
                    conformal_quantile(&scores, cfg.alpha)
                })
                .collect::<Result<_, _>>()?;
            let conservative = per_attack_q.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));

            if rep == 0 {
                let mut map = BTreeMap::new();
                for (j, attack) in ex.attacks.iter().enumerate() {
                    map.insert(attack.id().to_string(), per_attack_q[j]);
                }
                calibrations.insert(
                    id.clone(),
                    CalibrationResult {
                        model_id: id.clone(),
                        alpha: cfg.alpha,
                        per_attack_q: map,
                        conservative_q: conservative,
                    },
                );
            }

            for j in 0..ex.attacks.len() {
                let q = match rule {
                    ThresholdRule::PerAttack => per_attack_q[j],
                    ThresholdRule::Conservative => conservative,
                };
                let sets = sets_from_cache(&cache.test_all[k][j], &test_pos, q);
                cells[k][j].push(&sets, &test_labels, cfg.alpha, num_classes)?;
            }
        }
    }

    let mut rows = Vec::with_capacity(ex.defenses.len() * ex.attacks.len());
    for (j, attack) in ex.attacks.iter().enumerate() {
        for (k, (id, _)) in ex.defenses.iter().enumerate() {
            rows.push(cells[k][j].row(id, attack.id(), score_kind));
        }
    }
    Ok((rows, calibrations))
}

/// Known-attack pipeline: calibrate each (defense, attack) cell under its
/// own attack and evaluate on test data attacked identically.
pub fn cmd_rq1(cfg: &RunConfig) -> Result<(Vec<ReportRow>, Vec<PathBuf>), PipelineError> {
    let (rows, _) = run_replicated(cfg, ThresholdRule::PerAttack)?;
    let path = cfg.out_dir.join("rq1.csv");
    atomic_write(&path, &report_csv(&rows))?;
    Ok((rows, vec![path]))
}

/// Conservative pipeline: each defense thresholds at the maximum quantile
/// across the whole attack set, then faces every test attack.
pub fn cmd_rq2(cfg: &RunConfig) -> Result<(Vec<ReportRow>, Vec<PathBuf>), PipelineError> {
    let (rows, calibrations) = run_replicated(cfg, ThresholdRule::Conservative)?;
    let report_path = cfg.out_dir.join("rq2.csv");
    atomic_write(&report_path, &report_csv(&rows))?;
    let cal_path = cfg.out_dir.join("calibrations.json");
    let json =
        serde_json::to_string_pretty(&calibrations).expect("calibration map serialization");
    atomic_write(&cal_path, &json)?;
    Ok((rows, vec![report_path, cal_path]))
}

/// One strategy's test-set outcome in the game pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRow {
    pub strategy: String,
    pub coverage: f64,
    pub mean_size: f64,
    pub size_se: f64,
    pub sscv: Option<f64>,
}

/// Everything the game pipeline produces.
pub struct Rq3Output {
    pub eval_payoff: PayoffMatrix,
    pub test_payoff: PayoffMatrix,
    pub equilibrium: MixedStrategy,
    pub rows: Vec<StrategyRow>,
    pub files: Vec<PathBuf>,
}

fn equilibrium_json(eq: &MixedStrategy, row_ids: &[String], col_ids: &[String]) -> String {
    let defender: BTreeMap<&str, f64> = row_ids
        .iter()
        .map(String::as_str)
        .zip(eq.defender.iter().copied())
        .collect();
    let attacker: BTreeMap<&str, f64> = col_ids
        .iter()
        .map(String::as_str)
        .zip(eq.attacker.iter().copied())
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "defender": defender,
        "attacker": attacker,
        "value": eq.value,
    }))
    .expect("equilibrium serialization")
}

fn rq3_csv(rows: &[StrategyRow]) -> String {
    let mut out = String::from("strategy,coverage,size_mean,size_se,sscv\n");
    for r in rows {
        let sscv = r.sscv.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{sscv}\n",
            r.strategy, r.coverage, r.mean_size, r.size_se
        ));
    }
    out
}

/// Game pipeline: conservative calibration per defense, payoff matrices on
/// the evaluation and test sets, equilibrium via support enumeration, and
/// test-set evaluation of the equilibrium mix, the uniform baseline, and
/// every pure defense against the equilibrium attacker.
pub fn cmd_rq3(cfg: &RunConfig) -> Result<Rq3Output, PipelineError> {
    if cfg.split_mode == Some(SplitMode::Rq12) {
        return Err(PipelineError::Config(ConfigError::Invalid(
            "the game pipeline needs split.mode rq3 (it uses the evaluation set)".into(),
        )));
    }
    let ex = prepare(cfg, SplitMode::Rq3)?;
    let defense_refs: Vec<DefenseRef<'_>> = ex
        .defenses
        .iter()
        .map(|(id, m)| DefenseRef {
            id,
            model: m.as_model(),
        })
        .collect();

    let mut calibrations = BTreeMap::new();
    for (id, defense) in &ex.defenses {
        let target = ex.calibration_target(cfg.attack_target, defense.as_model());
        let result = calibrate_conservative(
            id,
            defense.as_model(),
            &ex.attacks,
            target,
            &ex.ds,
            &ex.base.cal,
            &ex.score,
            cfg.alpha,
            cfg.seed,
        )?;
        calibrations.insert(id.clone(), result);
    }

    let eval_payoff = build_payoff(
        &defense_refs,
        &ex.attacks,
        &ex.f0,
        &ex.ds,
        &ex.base.eval,
        &ex.score,
        &calibrations,
        cfg.seed,
        "eval",
    )?;
    let test_payoff = build_payoff(
        &defense_refs,
        &ex.attacks,
        &ex.f0,
        &ex.ds,
        &ex.base.test,
        &ex.score,
        &calibrations,
        cfg.seed,
        "test",
    )?;
    let equilibrium = solve_zero_sum(&eval_payoff)?;

    let strategy_seed = substream(cfg.seed, "strategy", 0);
    let num_classes = ex.ds.num_classes();
    let strata = singleton_strata(num_classes);
    let mut rows = Vec::new();
    let mut evaluate = |name: String, defender: Vec<f64>| -> Result<(), PipelineError> {
        let outcome = evaluate_strategy(
            &defender,
            &equilibrium.attacker,
            &defense_refs,
            &ex.attacks,
            &ex.f0,
            &ex.ds,
            &ex.base.test,
            &ex.score,
            &calibrations,
            strategy_seed,
        )?;
        let sscv = metrics::sscv(
            &outcome.sets,
            &outcome.labels,
            cfg.alpha,
            &strata,
            num_classes,
        )?;
        rows.push(StrategyRow {
            strategy: name,
            coverage: outcome.coverage,
            mean_size: outcome.mean_size,
            size_se: outcome.size_se(),
            sscv,
        });
        Ok(())
    };
    evaluate("nash".into(), equilibrium.defender.clone())?;
    evaluate("uniform".into(), uniform_strategy(ex.defenses.len()))?;
    for (k, (id, _)) in ex.defenses.iter().enumerate() {
        evaluate(format!("pure:{id}"), pure_strategy(ex.defenses.len(), k))?;
    }

    let mut files = Vec::new();
    let eval_path = cfg.out_dir.join("payoff_eval.csv");
    atomic_write(&eval_path, &eval_payoff.to_csv())?;
    files.push(eval_path);
    let test_path = cfg.out_dir.join("payoff_test.csv");
    atomic_write(&test_path, &test_payoff.to_csv())?;
    files.push(test_path);
    let eq_path = cfg.out_dir.join("equilibrium.json");
    atomic_write(
        &eq_path,
        &equilibrium_json(&equilibrium, &eval_payoff.row_ids, &eval_payoff.col_ids),
    )?;
    files.push(eq_path);
    let report_path = cfg.out_dir.join("rq3.csv");
    atomic_write(&report_path, &rq3_csv(&rows))?;
    files.push(report_path);
    let cal_path = cfg.out_dir.join("calibrations.json");
    let json =
        serde_json::to_string_pretty(&calibrations).expect("calibration map serialization");
    atomic_write(&cal_path, &json)?;
    files.push(cal_path);
    let split_path = cfg.out_dir.join("split.json");
    write_split(&ex.base, &split_path)?;
    files.push(split_path);

    Ok(Rq3Output {
        eval_payoff,
        test_payoff,
        equilibrium,
        rows,
        files,
    })
}

/// Solve a payoff matrix from a CSV file and write the equilibrium.
pub fn cmd_solve_game(
    matrix_path: &Path,
    out_dir: &Path,
) -> Result<(MixedStrategy, PayoffMatrix, Vec<PathBuf>), PipelineError> {
    let payoff = PayoffMatrix::read_csv(matrix_path)?;
    let eq = solve_zero_sum(&payoff)?;
    let path = out_dir.join("equilibrium.json");
    atomic_write(&path, &equilibrium_json(&eq, &payoff.row_ids, &payoff.col_ids))?;
    Ok((eq, payoff, vec![path]))
}
