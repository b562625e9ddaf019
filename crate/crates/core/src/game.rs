//! Payoff matrices and zero-sum game solving.
//!
//! The defender picks a row (a defense model), the attacker picks a column
//! (an attack), and the payoff is the mean prediction-set size: the
//! attacker's gain and the defender's cost. `solve_zero_sum` finds a Nash
//! equilibrium by support enumeration, solving the indifference system for
//! every nonempty support pair in lexicographic order and accepting the
//! first solution that is nonnegative, normalized, and best-response
//! stable. `lp_minimax` solves the same game through the standard linear
//! program with Bland's rule and serves as an independent cross-check.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{apply_attack, AttackSpec};
use crate::conformal::{prediction_set, CalibrationResult, ConformalError, PredictionSet};
use crate::dataio::Dataset;
use crate::model::Model;
use crate::rng::{rng_from, substream};
use crate::scores::ScoreSpec;

/// Numerical tolerance for the linear solves and equilibrium checks.
const TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GameError {
    #[error(transparent)]
    Conformal(#[from] ConformalError),

    #[error("defense {0} has no calibration result")]
    MissingCalibration(String),

    #[error("invalid payoff matrix: {0}")]
    InvalidMatrix(String),

    #[error("no equilibrium found; this indicates a numerical-tolerance bug")]
    NoEquilibrium,

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("payoff file {path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Defender-by-attacker matrix of mean prediction-set sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffMatrix {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl PayoffMatrix {
    pub fn new(
        row_ids: Vec<String>,
        col_ids: Vec<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, GameError> {
        if row_ids.is_empty() || col_ids.is_empty() {
            return Err(GameError::InvalidMatrix("matrix must be nonempty".into()));
        }
        if values.len() != row_ids.len() {
            return Err(GameError::InvalidMatrix(format!(
                "{} rows of values for {} row ids",
                values.len(),
                row_ids.len()
            )));
        }
        for (r, row) in values.iter().enumerate() {
            if row.len() != col_ids.len() {
                return Err(GameError::InvalidMatrix(format!(
                    "row {r} has {} entries for {} columns",
                    row.len(),
                    col_ids.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(GameError::InvalidMatrix(format!("row {r} has a non-finite entry")));
            }
        }
        Ok(Self {
            row_ids,
            col_ids,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.row_ids.len(), self.col_ids.len())
    }

    /// CSV with header `defense,<attack ids...>` and one row per defense.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("defense");
        for c in &self.col_ids {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (id, row) in self.row_ids.iter().zip(&self.values) {
            out.push_str(id);
            for v in row {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GameError> {
        std::fs::write(path, self.to_csv()).map_err(|e| GameError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self, GameError> {
        let text = std::fs::read_to_string(path).map_err(|e| GameError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let pathstr = path.display().to_string();
        let fmt = |line: usize, msg: String| GameError::Format {
            path: pathstr.clone(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| fmt(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"defense") || cols.len() < 2 {
            return Err(fmt(1, format!("bad header {header:?}")));
        }
        let col_ids: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let mut row_ids = Vec::new();
        let mut values = Vec::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != col_ids.len() + 1 {
                return Err(fmt(
                    idx + 1,
                    format!("expected {} fields, got {}", col_ids.len() + 1, fields.len()),
                ));
            }
            row_ids.push(fields[0].to_string());
            let row: Result<Vec<f64>, _> = fields[1..]
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| fmt(idx + 1, format!("malformed value {s:?}")))
                })
                .collect();
            values.push(row?);
        }
        if values.is_empty() {
            return Err(fmt(1, "no rows".into()));
        }
        Self::new(row_ids, col_ids, values)
    }
}

/// Equilibrium strategies and the game value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedStrategy {
    pub defender: Vec<f64>,
    pub attacker: Vec<f64>,
    pub value: f64,
}

/// `u^T P w`.
pub fn expected_value(values: &[Vec<f64>], defender: &[f64], attacker: &[f64]) -> f64 {
    let mut total = 0.0;
    for (uk, row) in defender.iter().zip(values) {
        for (wj, v) in attacker.iter().zip(row) {
            total += uk * wj * v;
        }
    }
    total
}

/// Solve `A x = b` exactly by Gaussian elimination with partial pivoting.
/// Returns `None` when the system is rank-deficient in the unknowns or
/// inconsistent beyond the tolerance. `A` may have more rows than columns.
fn solve_exact(a: &[Vec<f64>], b: &[f64], tol: f64) -> Option<Vec<f64>> {
    let rows = a.len();
    let cols = if rows == 0 { return None } else { a[0].len() };
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &rhs)| {
            let mut r = row.clone();
            r.push(rhs);
            r
        })
        .collect();

    let mut pivot_row = 0usize;
    let mut pivots = Vec::with_capacity(cols);
    for col in 0..cols {
        let (best, best_val) = (pivot_row..rows)
            .map(|r| (r, m[r][col].abs()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())?;
        if best_val <= tol {
            return None; // rank-deficient: underdetermined system
        }
        m.swap(pivot_row, best);
        let inv = 1.0 / m[pivot_row][col];
        for c in col..=cols {
            m[pivot_row][c] *= inv;
        }
        for r in 0..rows {
            if r != pivot_row {
                let factor = m[r][col];
                if factor != 0.0 {
                    for c in col..=cols {
                        m[r][c] -= factor * m[pivot_row][c];
                    }
                }
            }
        }
        pivots.push(pivot_row);
        pivot_row += 1;
        if pivot_row == rows {
            if col + 1 < cols {
                return None;
            }
            break;
        }
    }

    let x: Vec<f64> = (0..cols).map(|c| m[pivots[c]][cols]).collect();
    // Residual check covers the surplus rows of an overdetermined system.
    for (row, &rhs) in a.iter().zip(b) {
        let lhs: f64 = row.iter().zip(&x).map(|(aij, xj)| aij * xj).sum();
        if (lhs - rhs).abs() > tol * 10.0 {
            return None;
        }
    }
    Some(x)
}

/// Nonempty subsets of `0..n` as sorted index lists, in lexicographic
/// order of the lists themselves.
fn subsets_lex(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity((1usize << n) - 1);
    let mut stack: Vec<Vec<usize>> = (0..n).rev().map(|i| vec![i]).collect();
    while let Some(cur) = stack.pop() {
        let last = *cur.last().unwrap();
        for next in (last + 1..n).rev() {
            let mut ext = cur.clone();
            ext.push(next);
            stack.push(ext);
        }
        out.push(cur);
    }
    out
}

/// Try one support pair: solve the indifference system and verify the
/// equilibrium conditions on the full matrix.
fn try_support(
    values: &[Vec<f64>],
    rows: &[usize],
    cols: &[usize],
) -> Option<MixedStrategy> {
    let p = values.len();
    let m = values[0].len();
    let r = rows.len();
    let c = cols.len();
    let unknowns = r + c + 1; // defender mass, attacker mass, game value

    // Indifference inside each support plus the two normalizations.
    let mut a: Vec<Vec<f64>> = Vec::with_capacity(r + c + 2);
    let mut b: Vec<f64> = Vec::with_capacity(r + c + 2);
    for &j in cols {
        let mut row = vec![0.0; unknowns];
        for (idx, &k) in rows.iter().enumerate() {
            row[idx] = values[k][j];
        }
        row[r + c] = -1.0;
        a.push(row);
        b.push(0.0);
    }
    for &k in rows {
        let mut row = vec![0.0; unknowns];
        for (idx, &j) in cols.iter().enumerate() {
            row[r + idx] = values[k][j];
        }
        row[r + c] = -1.0;
        a.push(row);
        b.push(0.0);
    }
    let mut norm_u = vec![0.0; unknowns];
    for idx in 0..r {
        norm_u[idx] = 1.0;
    }
    a.push(norm_u);
    b.push(1.0);
    let mut norm_w = vec![0.0; unknowns];
    for idx in 0..c {
        norm_w[r + idx] = 1.0;
    }
    a.push(norm_w);
    b.push(1.0);

    let sol = solve_exact(&a, &b, TOL)?;

    let mut defender = vec![0.0; p];
    for (idx, &k) in rows.iter().enumerate() {
        if sol[idx] < -TOL {
            return None;
        }
        defender[k] = sol[idx].max(0.0);
    }
    let mut attacker = vec![0.0; m];
    for (idx, &j) in cols.iter().enumerate() {
        if sol[r + idx] < -TOL {
            return None;
        }
        attacker[j] = sol[r + idx].max(0.0);
    }
    let v = sol[r + c];

    // Renormalize away the clamping of tiny negatives.
    let su: f64 = defender.iter().sum();
    let sw: f64 = attacker.iter().sum();
    if (su - 1.0).abs() > 1e-6 || (sw - 1.0).abs() > 1e-6 {
        return None;
    }
    for u in &mut defender {
        *u /= su;
    }
    for w in &mut attacker {
        *w /= sw;
    }

    // Best-response stability: no column may pay the attacker more than v,
    // no row may cost the defender less than v.
    for j in 0..m {
        let pay: f64 = defender.iter().zip(values).map(|(u, row)| u * row[j]).sum();
        if pay > v + 1e-7 {
            return None;
        }
    }
    for row in values {
        let cost: f64 = attacker.iter().zip(row).map(|(w, pv)| w * pv).sum();
        if cost < v - 1e-7 {
            return None;
        }
    }

    let value = expected_value(values, &defender, &attacker);
    Some(MixedStrategy {
        defender,
        attacker,
        value,
    })
}

/// All equilibria found by support enumeration, in lexicographic order of
/// the (defender support, attacker support) pair.
pub fn enumerate_equilibria(p: &PayoffMatrix) -> Vec<MixedStrategy> {
    let (rows, cols) = p.shape();
    let row_subsets = subsets_lex(rows);
    let col_subsets = subsets_lex(cols);
    let mut out = Vec::new();
    for r in &row_subsets {
        for c in &col_subsets {
            if let Some(eq) = try_support(&p.values, r, c) {
                out.push(eq);
            }
        }
    }
    out
}

/// The canonical equilibrium: first support pair in lexicographic order
/// that passes the equilibrium checks. The defender minimizes, the
/// attacker maximizes; the value is the minimax mean set size.
pub fn solve_zero_sum(p: &PayoffMatrix) -> Result<MixedStrategy, GameError> {
    let (rows, cols) = p.shape();
    let row_subsets = subsets_lex(rows);
    let col_subsets = subsets_lex(cols);
    for r in &row_subsets {
        for c in &col_subsets {
            if let Some(eq) = try_support(&p.values, r, c) {
                return Ok(eq);
            }
        }
    }
    Err(GameError::NoEquilibrium)
}

/// Minimax value and defender strategy through the standard LP.
///
/// After shifting the matrix positive, `min_u max_j (u^T P)_j` over the
/// simplex becomes `max 1^T z` subject to `P^T z <= 1, z >= 0` with
/// `u = z / (1^T z)` and value `1 / (1^T z)`. Solved by the primal simplex
/// method with Bland's rule, which cannot cycle.
pub fn lp_minimax(values: &[Vec<f64>]) -> Result<(f64, Vec<f64>), GameError> {
    if values.is_empty() || values[0].is_empty() {
        return Err(GameError::InvalidMatrix("matrix must be nonempty".into()));
    }
    let p = values.len();
    let m = values[0].len();
    for row in values {
        if row.len() != m {
            return Err(GameError::InvalidMatrix("ragged matrix".into()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(GameError::InvalidMatrix("non-finite entry".into()));
        }
    }
    let min_entry = values
        .iter()
        .flat_map(|r| r.iter())
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let shift = 1.0 - min_entry;

    // Tableau rows: one constraint per column of P. Columns: z variables,
    // slacks, rhs. Final row is the reduced-cost row of the maximization.
    let ncols = p + m + 1;
    let mut t = vec![vec![0.0; ncols]; m + 1];
    for j in 0..m {
        for k in 0..p {
            t[j][k] = values[k][j] + shift;
        }
        t[j][p + j] = 1.0;
        t[j][ncols - 1] = 1.0;
    }
    for k in 0..p {
        t[m][k] = -1.0;
    }
    let mut basis: Vec<usize> = (p..p + m).collect();

    // Bland: the entering variable is the lowest-index negative reduced
    // cost; iteration stops when none remains.
    while let Some(enter) = (0..p + m).find(|&j| t[m][j] < -TOL) {
        // Ratio test; ties broken by lowest basis variable index (Bland).
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[i][enter] > TOL {
                let ratio = t[i][ncols - 1] / t[i][enter];
                let better = match leave {
                    None => true,
                    Some((li, lr)) => {
                        ratio < lr - TOL || ((ratio - lr).abs() <= TOL && basis[i] < basis[li])
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let Some((li, _)) = leave else {
            return Err(GameError::InvalidMatrix("unbounded minimax program".into()));
        };
        let pivot = t[li][enter];
        for c in 0..ncols {
            t[li][c] /= pivot;
        }
        for r in 0..=m {
            if r != li {
                let factor = t[r][enter];
                if factor != 0.0 {
                    for c in 0..ncols {
                        t[r][c] -= factor * t[li][c];
                    }
                }
            }
        }
        basis[li] = enter;
    }

    let objective = t[m][ncols - 1];
    if objective <= TOL {
        return Err(GameError::InvalidMatrix("degenerate minimax program".into()));
    }
    let mut z = vec![0.0; p];
    for (i, &var) in basis.iter().enumerate() {
        if var < p {
            z[var] = t[i][ncols - 1];
        }
    }
    let value = 1.0 / objective - shift;
    let defender: Vec<f64> = z.iter().map(|zi| zi / objective).collect();
    Ok((value, defender))
}

/// A named defense participating in the game.
pub struct DefenseRef<'a> {
    pub id: &'a str,
    pub model: &'a dyn Model,
}

/// Mean prediction-set size per (defense, attack) pair over the indexed
/// examples. Each defense thresholds at its own conservative quantile;
/// attacks target the fixed pre-trained model.
#[allow(clippy::too_many_arguments)]
pub fn build_payoff(
    defenses: &[DefenseRef<'_>],
    attacks: &[AttackSpec],
    f0: &dyn Model,
    ds: &Dataset,
    indices: &[usize],
    spec: &ScoreSpec,
    calibrations: &BTreeMap<String, CalibrationResult>,
    seed: u64,
    stream_label: &str,
) -> Result<PayoffMatrix, GameError> {
    if indices.is_empty() {
        return Err(GameError::InvalidMatrix("no evaluation examples".into()));
    }
    for d in defenses {
        if !calibrations.contains_key(d.id) {
            return Err(GameError::MissingCalibration(d.id.to_string()));
        }
    }
    // Attacked inputs do not depend on the defense, so compute them once
    // per attack column.
    let mut attacked: Vec<Vec<Vec<f64>>> = Vec::with_capacity(attacks.len());
    for attack in attacks {
        let mut column = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = ds.example(i);
            column.push(
                apply_attack(attack, f0, &ex.features, ex.label)
                    .map_err(ConformalError::from)?,
            );
        }
        attacked.push(column);
    }

    let mut values = Vec::with_capacity(defenses.len());
    for d in defenses {
        let q = calibrations[d.id].conservative_q;
        let mut row = Vec::with_capacity(attacks.len());
        for (j, attack) in attacks.iter().enumerate() {
            let resolved = spec.resolved_for(attack);
            let mut total = 0usize;
            for (pos, &i) in indices.iter().enumerate() {
                let set = prediction_set(
                    &resolved,
                    d.model,
                    &attacked[j][pos],
                    q,
                    substream(seed, stream_label, i as u64),
                )?;
                total += set.size();
            }
            row.push(total as f64 / indices.len() as f64);
        }
        values.push(row);
    }
    PayoffMatrix::new(
        defenses.iter().map(|d| d.id.to_string()).collect(),
        attacks.iter().map(|a| a.id().to_string()).collect(),
        values,
    )
}

/// Per-example record of a strategy evaluation.
#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub sets: Vec<PredictionSet>,
    pub labels: Vec<usize>,
    pub mean_size: f64,
    pub coverage: f64,
}

impl StrategyOutcome {
    /// Standard error of the mean set size.
    pub fn size_se(&self) -> f64 {
        let n = self.sets.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean = self.mean_size;
        let var = self
            .sets
            .iter()
            .map(|s| {
                let d = s.size() as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    }
}

/// Sample from a distribution by inverse CDF walk.
fn sample_index(dist: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(dist.len() - 1)
}

fn check_dist(dist: &[f64], len: usize, who: &str) -> Result<(), GameError> {
    if dist.len() != len {
        return Err(GameError::InvalidStrategy(format!(
            "{who} distribution has {} entries for {len} options",
            dist.len()
        )));
    }
    if dist.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
        return Err(GameError::InvalidStrategy(format!("{who} probabilities out of range")));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(GameError::InvalidStrategy(format!("{who} distribution sums to {sum}")));
    }
    Ok(())
}

/// Play a mixed defense against a mixed attack on the indexed examples.
///
/// For every example, a defense is drawn from the defender distribution
/// and an attack from the attacker distribution (independent per-example
/// streams); the example is attacked against the pre-trained model and the
/// drawn defense builds its set at its own conservative threshold.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_strategy(
    defender_dist: &[f64],
    attacker_dist: &[f64],
    defenses: &[DefenseRef<'_>],
    attacks: &[AttackSpec],
    f0: &dyn Model,
    ds: &Dataset,
    indices: &[usize],
    spec: &ScoreSpec,
    calibrations: &BTreeMap<String, CalibrationResult>,
    seed: u64,
) -> Result<StrategyOutcome, GameError> {
    check_dist(defender_dist, defenses.len(), "defender")?;
    check_dist(attacker_dist, attacks.len(), "attacker")?;
    if indices.is_empty() {
        return Err(GameError::InvalidStrategy("no test examples".into()));
    }
    for d in defenses {
        if !calibrations.contains_key(d.id) {
            return Err(GameError::MissingCalibration(d.id.to_string()));
        }
    }
    let mut sets = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut covered = 0usize;
    let mut total_size = 0usize;
    for &i in indices {
        let ex = ds.example(i);
        let ud: f64 = rng_from(substream(seed, "defense-draw", i as u64)).random();
        let ua: f64 = rng_from(substream(seed, "attack-draw", i as u64)).random();
        let k = sample_index(defender_dist, ud);
        let j = sample_index(attacker_dist, ua);
        let defense = &defenses[k];
        let attack = &attacks[j];
        let q = calibrations[defense.id].conservative_q;
        let attacked = apply_attack(attack, f0, &ex.features, ex.label)
            .map_err(ConformalError::from)?;
        let resolved = spec.resolved_for(attack);
        let set = prediction_set(
            &resolved,
            defense.model,
            &attacked,
            q,
            substream(seed, "test", i as u64),
        )?;
        if set.contains(ex.label) {
            covered += 1;
        }
        total_size += set.size();
        sets.push(set);
        labels.push(ex.label);
    }
    let n = indices.len() as f64;
    Ok(StrategyOutcome {
        mean_size: total_size as f64 / n,
        coverage: covered as f64 / n,
        sets,
        labels,
    })
}

/// Degenerate distribution concentrated on one option.
pub fn pure_strategy(len: usize, index: usize) -> Vec<f64> {
    let mut d = vec![0.0; len];
    d[index] = 1.0;
    d
}

/// The equal-weights distribution.
pub fn uniform_strategy(len: usize) -> Vec<f64> {
    vec![1.0 / len as f64; len]
}
