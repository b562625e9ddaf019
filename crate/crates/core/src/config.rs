//! Flat key-value run configuration.
//!
//! The config file is plain `key = value` lines with dotted section
//! prefixes (for example `attacks.fgsm.epsilon = 0.1`). `#` starts a
//! comment. Unknown keys are errors so typos cannot silently fall back to
//! defaults. Every random stream in a run is derived from the single
//! `seed` value; there are no per-section seed knobs.

use std::path::PathBuf;

use thiserror::Error;

use crate::attacks::{AttackKind, AttackSpec};
use crate::dataio::SplitMode;
use crate::model::{Arch, TrainConfig};
use crate::scores::{BaseScore, ScoreKind, ScoreSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },

    #[error("config key {key}: {msg}")]
    InvalidValue { key: String, msg: String },

    #[error("config error: {0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Where the examples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
    File(PathBuf),
}

/// A defense the pipeline should build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DefenseKind {
    /// Trained on clean data only.
    Normal,
    /// Adversarially trained against the named attack.
    Trained(AttackKind),
    /// Element-wise max of the trained members' logits.
    Max,
    /// Element-wise min of the trained members' logits.
    Min,
}

impl DefenseKind {
    pub fn id(&self) -> String {
        match self {
            DefenseKind::Normal => "normal".into(),
            DefenseKind::Trained(kind) => kind.id().into(),
            DefenseKind::Max => "max".into(),
            DefenseKind::Min => "min".into(),
        }
    }

    fn parse(token: &str) -> Option<Self> {
        match token {
            "normal" => Some(DefenseKind::Normal),
            "max" => Some(DefenseKind::Max),
            "min" => Some(DefenseKind::Min),
            other => AttackKind::parse(other).map(DefenseKind::Trained),
        }
    }
}

/// Which model calibration attacks are generated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttackTarget {
    /// The fixed pre-trained model (the default reading).
    #[default]
    Pretrained,
    /// The defense being calibrated.
    Defense,
}

/// Everything a pipeline run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub seed: u64,
    pub replications: usize,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub split_mode: Option<SplitMode>,
    pub attacks: Vec<AttackSpec>,
    pub score: ScoreSpec,
    pub train: TrainConfig,
    pub defenses: Vec<DefenseKind>,
    pub models_dir: Option<PathBuf>,
    pub attack_target: AttackTarget,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            seed: 0,
            replications: 20,
            out_dir: PathBuf::from("."),
            data: DataSource::Synthetic {
                num_classes: 3,
                dim: 4,
                per_class: 200,
                spread: 0.08,
            },
            split_mode: None,
            attacks: AttackKind::ALL.iter().map(|&k| AttackSpec::new(k)).collect(),
            score: ScoreSpec::aps(),
            train: TrainConfig::default(),
            defenses: vec![
                DefenseKind::Normal,
                DefenseKind::Trained(AttackKind::Fgsm),
                DefenseKind::Trained(AttackKind::Pgd),
                DefenseKind::Trained(AttackKind::Spsa),
            ],
            models_dir: None,
            attack_target: AttackTarget::Pretrained,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConfigError::InvalidValue {
                key: "alpha".into(),
                msg: format!("must lie strictly between 0 and 1, got {}", self.alpha),
            });
        }
        if self.replications < 1 {
            return Err(ConfigError::InvalidValue {
                key: "replications".into(),
                msg: "must be >= 1".into(),
            });
        }
        if self.attacks.is_empty() {
            return Err(ConfigError::Invalid("attack set is empty".into()));
        }
        if self.defenses.is_empty() {
            return Err(ConfigError::Invalid("defense list is empty".into()));
        }
        let has_member = self
            .defenses
            .iter()
            .any(|d| matches!(d, DefenseKind::Trained(_)));
        if !has_member
            && self
                .defenses
                .iter()
                .any(|d| matches!(d, DefenseKind::Max | DefenseKind::Min))
        {
            return Err(ConfigError::Invalid(
                "max/min defenses need at least one attack-trained member".into(),
            ));
        }
        if let DataSource::Synthetic {
            num_classes,
            dim,
            per_class,
            spread,
        } = &self.data
        {
            if *num_classes < 2 || *dim < 1 || *per_class < 1 || !(*spread > 0.0) {
                return Err(ConfigError::Invalid(
                    "synthetic data needs classes >= 2, dim >= 1, per_class >= 1, spread > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

struct Line<'a> {
    no: usize,
    key: &'a str,
    value: &'a str,
}

fn parse_lines(text: &str) -> Result<Vec<Line<'_>>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some(eq) = line.find('=') else {
            return Err(ConfigError::Parse {
                line: no,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        let key = line[..eq].trim();
        let value = line[eq + 1..].trim();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Parse {
                line: no,
                msg: "empty key or value".into(),
            });
        }
        out.push(Line { no, key, value });
    }
    Ok(out)
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| invalid(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, format!("expected a boolean, got {value:?}"))),
    }
}

/// Parse a config file's text. Later lines override earlier ones; keys not
/// present keep their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let lines = parse_lines(text)?;

    // The attack list line determines which attack specs exist; collect
    // attack parameter overrides first and apply them afterwards so line
    // order does not matter.
    let mut attack_list: Option<Vec<AttackKind>> = None;
    let mut attack_params: Vec<(usize, String, String)> = Vec::new();
    let mut synthetic = match cfg.data {
        DataSource::Synthetic {
            num_classes,
            dim,
            per_class,
            spread,
        } => (num_classes, dim, per_class, spread),
        _ => unreachable!(),
    };
    let mut data_path: Option<PathBuf> = None;

    for line in &lines {
        let (key, value, no) = (line.key, line.value, line.no);
        match key {
            "alpha" => cfg.alpha = parse_num(key, value)?,
            "seed" => cfg.seed = parse_num(key, value)?,
            "replications" => cfg.replications = parse_num(key, value)?,
            "out" => cfg.out_dir = PathBuf::from(value),
            "data.path" => data_path = Some(PathBuf::from(value)),
            "data.classes" => synthetic.0 = parse_num(key, value)?,
            "data.dim" => synthetic.1 = parse_num(key, value)?,
            "data.per_class" => synthetic.2 = parse_num(key, value)?,
            "data.spread" => synthetic.3 = parse_num(key, value)?,
            "split.mode" => {
                cfg.split_mode = Some(match value {
                    "rq12" => SplitMode::Rq12,
                    "rq3" => SplitMode::Rq3,
                    _ => return Err(invalid(key, format!("expected rq12 or rq3, got {value:?}"))),
                })
            }
            "attacks" => {
                let kinds: Result<Vec<AttackKind>, _> = value
                    .split(',')
                    .map(str::trim)
                    .map(|tok| {
                        AttackKind::parse(tok)
                            .ok_or_else(|| invalid(key, format!("unknown attack {tok:?}")))
                    })
                    .collect();
                attack_list = Some(kinds?);
            }
            "defenses" => {
                let kinds: Result<Vec<DefenseKind>, _> = value
                    .split(',')
                    .map(str::trim)
                    .map(|tok| {
                        DefenseKind::parse(tok)
                            .ok_or_else(|| invalid(key, format!("unknown defense {tok:?}")))
                    })
                    .collect();
                cfg.defenses = kinds?;
            }
            "score.kind" => {
                cfg.score.kind = ScoreKind::parse(value)
                    .ok_or_else(|| invalid(key, format!("unknown score kind {value:?}")))?
            }
            "score.base" => {
                cfg.score.base = BaseScore::parse(value)
                    .ok_or_else(|| invalid(key, format!("unknown base score {value:?}")))?
            }
            "score.sigma" => cfg.score.sigma = parse_num(key, value)?,
            "score.n_noise" => cfg.score.n_noise = parse_num(key, value)?,
            "score.vrcp_epsilon" => cfg.score.vrcp_epsilon = Some(parse_num(key, value)?),
            "score.n_perturb" => cfg.score.n_perturb = parse_num(key, value)?,
            "score.include_clean_copy" => {
                cfg.score.include_clean_copy = parse_bool(key, value)?
            }
            "train.epochs" => cfg.train.epochs = parse_num(key, value)?,
            "train.batch_size" => cfg.train.batch_size = parse_num(key, value)?,
            "train.learning_rate" => cfg.train.learning_rate = parse_num(key, value)?,
            "train.lr_decay" => cfg.train.lr_decay = parse_num(key, value)?,
            "train.hidden" => cfg.train.hidden = parse_num(key, value)?,
            "train.arch" => {
                cfg.train.arch = match value {
                    "linear" => Arch::Linear,
                    "mlp1" => Arch::Mlp1,
                    _ => return Err(invalid(key, format!("expected linear or mlp1, got {value:?}"))),
                }
            }
            "models.dir" => cfg.models_dir = Some(PathBuf::from(value)),
            "attack_target" => {
                cfg.attack_target = match value {
                    "f0" => AttackTarget::Pretrained,
                    "fk" => AttackTarget::Defense,
                    _ => return Err(invalid(key, format!("expected f0 or fk, got {value:?}"))),
                }
            }
            other if other.starts_with("attacks.") => {
                attack_params.push((no, other.to_string(), value.to_string()));
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: no,
                    key: key.to_string(),
                })
            }
        }
    }

    cfg.data = match data_path {
        Some(p) => DataSource::File(p),
        None => DataSource::Synthetic {
            num_classes: synthetic.0,
            dim: synthetic.1,
            per_class: synthetic.2,
            spread: synthetic.3,
        },
    };

    if let Some(kinds) = attack_list {
        cfg.attacks = kinds.into_iter().map(AttackSpec::new).collect();
    }
    for (no, key, value) in attack_params {
        apply_attack_param(&mut cfg.attacks, no, &key, &value)?;
    }

    cfg.validate()?;
    Ok(cfg)
}

fn apply_attack_param(
    attacks: &mut [AttackSpec],
    line: usize,
    key: &str,
    value: &str,
) -> Result<(), ConfigError> {
    let rest = &key["attacks.".len()..];
    let Some((kind_tok, param)) = rest.split_once('.') else {
        return Err(ConfigError::UnknownKey {
            line,
            key: key.to_string(),
        });
    };
    let Some(kind) = AttackKind::parse(kind_tok) else {
        return Err(invalid(key, format!("unknown attack {kind_tok:?}")));
    };
    let Some(spec) = attacks.iter_mut().find(|a| a.kind == kind) else {
        return Err(invalid(
            key,
            format!("attack {kind_tok:?} is not in the configured attack set"),
        ));
    };
    match param {
        "epsilon" => spec.epsilon = parse_num(key, value)?,
        "step" => match kind {
            AttackKind::Pgd => spec.pgd_step = parse_num(key, value)?,
            AttackKind::Spsa => spec.spsa_step = parse_num(key, value)?,
            _ => return Err(invalid(key, "step applies to pgd or spsa")),
        },
        "iters" => match kind {
            AttackKind::Pgd => spec.pgd_iters = parse_num(key, value)?,
            AttackKind::Spsa => spec.spsa_iters = parse_num(key, value)?,
            _ => return Err(invalid(key, "iters applies to pgd or spsa")),
        },
        "delta" if kind == AttackKind::Spsa => spec.spsa_delta = parse_num(key, value)?,
        "samples" if kind == AttackKind::Spsa => spec.spsa_samples = parse_num(key, value)?,
        "c" if kind == AttackKind::Cw => spec.cw_c = parse_num(key, value)?,
        "kappa" if kind == AttackKind::Cw => spec.cw_kappa = parse_num(key, value)?,
        "steps" if kind == AttackKind::Cw => spec.cw_steps = parse_num(key, value)?,
        "lr" if kind == AttackKind::Cw => spec.cw_lr = parse_num(key, value)?,
        "clip_to_eps" if kind == AttackKind::Cw => {
            spec.cw_clip_to_eps = parse_bool(key, value)?
        }
        _ => {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            })
        }
    }
    Ok(())
}

/// Load and parse a config file.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config(&text)
}
