//! Transition-log ingestion, normalization statistics and GP training pairs.
//!
//! CSV format: header `t,x1,...,xp,u1,...,uq`, UTF-8, `\n` line endings,
//! floats in decimal or scientific notation, no quoting. Consecutive rows
//! become transitions unless separated by a time gap larger than 1.5 dt.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::array::Array;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("bad header: expected `t,x1..xp,u1..uq`, got `{found}`")]
    BadHeader { found: String },
    #[error("line {line}, column {col}: non-numeric value `{value}`")]
    NonNumeric {
        line: usize,
        col: usize,
        value: String,
    },
    #[error("need at least 3 data rows, found {rows}")]
    TooFewRows { rows: usize },
    #[error("line {line}: rows not sorted by time ({prev} then {curr})")]
    NotSorted { line: usize, prev: f64, curr: f64 },
    #[error("line {line}: sampling interval {found:.6} deviates more than 1% from dt={dt:.6}")]
    InconsistentDt { line: usize, dt: f64, found: f64 },
    #[error("no transitions survive the gap rule")]
    NoTransitions,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Logged transitions: row k holds (state, action, next state) at constant dt.
#[derive(Debug, Clone)]
pub struct TransitionDataset {
    pub states: Array,      // n x p
    pub actions: Array,     // n x q
    pub next_states: Array, // n x p
    pub dt: f64,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    /// Per-column (min, max) of observed states.
    pub fn state_extents(&self) -> Vec<(f64, f64)> {
        let p = self.state_dim();
        let mut ext = vec![(f64::INFINITY, f64::NEG_INFINITY); p];
        for i in 0..self.len() {
            for c in 0..p {
                let v = self.states.get2(i, c);
                ext[c].0 = ext[c].0.min(v);
                ext[c].1 = ext[c].1.max(v);
            }
        }
        ext
    }
}

const STD_CLAMP: f64 = 1e-8;

/// Per-column statistics of the concatenated (state, action) inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns whose std fell below the clamp threshold (std forced to 1).
    pub flagged: Vec<bool>,
    pub p: usize,
    pub q: usize,
}

impl Normalizer {
    pub fn dim(&self) -> usize {
        self.p + self.q
    }

    pub fn normalize_value(&self, col: usize, v: f64) -> f64 {
        (v - self.mean[col]) / self.std[col]
    }

    pub fn denormalize_value(&self, col: usize, v: f64) -> f64 {
        v * self.std[col] + self.mean[col]
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(c, &v)| self.normalize_value(c, v))
            .collect()
    }

    pub fn denormalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(c, &v)| self.denormalize_value(c, v))
            .collect()
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(c, &v)| self.normalize_value(self.p + c, v))
            .collect()
    }
}

/// Normalized GP inputs and standardized difference targets.
#[derive(Debug, Clone)]
pub struct TrainingPairs {
    pub inputs: Array,  // n x (p+q), normalized
    pub targets: Array, // n x p, raw deltas scaled by 1/target_std
    pub target_stds: Vec<f64>,
    pub p: usize,
    pub q: usize,
}

impl TrainingPairs {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn target_column(&self, m: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.targets.get2(i, m)).collect()
    }
}

fn parse_cell(tok: &str, line: usize, col: usize) -> Result<f64, DataError> {
    tok.trim().parse::<f64>().map_err(|_| DataError::NonNumeric {
        line,
        col,
        value: tok.trim().to_string(),
    })
}

/// Parse a transition CSV. Consecutive rows (k, k+1) pair into transitions;
/// rows across a time gap > 1.5 dt are not paired. dt is the median of
/// consecutive time differences.
pub fn load_csv(path: &Path) -> Result<TransitionDataset, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines.next().ok_or(DataError::TooFewRows { rows: 0 })??;
    let (p, q) = parse_header(&header)?;
    let ncols = 1 + p + q;

    let mut times = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (li, line) in lines.enumerate() {
        let line = line?;
        let lineno = li + 2; // header is line 1
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != ncols {
            return Err(DataError::ColumnCount {
                line: lineno,
                expected: ncols,
                found: toks.len(),
            });
        }
        let t = parse_cell(toks[0], lineno, 0)?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(DataError::NotSorted {
                    line: lineno,
                    prev,
                    curr: t,
                });
            }
        }
        let mut row = Vec::with_capacity(p + q);
        for (c, tok) in toks[1..].iter().enumerate() {
            row.push(parse_cell(tok, lineno, c + 1)?);
        }
        times.push(t);
        rows.push(row);
    }
    if rows.len() < 3 {
        return Err(DataError::TooFewRows { rows: rows.len() });
    }

    let mut diffs: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let mut sorted = diffs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let dt = sorted[sorted.len() / 2];

    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut next_states = Vec::new();
    let mut n = 0usize;
    for (k, diff) in diffs.iter_mut().enumerate() {
        if *diff > 1.5 * dt {
            continue; // recording gap; do not pair across it
        }
        if (*diff - dt).abs() > 0.01 * dt {
            return Err(DataError::InconsistentDt {
                line: k + 3, // row k+1 of data, 1-based, after header
                dt,
                found: *diff,
            });
        }
        states.extend_from_slice(&rows[k][..p]);
        actions.extend_from_slice(&rows[k][p..]);
        next_states.extend_from_slice(&rows[k + 1][..p]);
        n += 1;
    }
    if n == 0 {
        return Err(DataError::NoTransitions);
    }
    Ok(TransitionDataset {
        states: Array::matrix(n, p, states),
        actions: Array::matrix(n, q, actions),
        next_states: Array::matrix(n, p, next_states),
        dt,
    })
}

fn parse_header(header: &str) -> Result<(usize, usize), DataError> {
    let cols: Vec<&str> = header.trim().split(',').collect();
    let bad = || DataError::BadHeader {
        found: header.trim().to_string(),
    };
    if cols.first() != Some(&"t") || cols.len() < 3 {
        return Err(bad());
    }
    let mut p = 0usize;
    let mut q = 0usize;
    for (i, c) in cols[1..].iter().enumerate() {
        if q == 0 && *c == format!("x{}", p + 1) {
            p += 1;
        } else if *c == format!("u{}", q + 1) {
            q += 1;
        } else {
            let _ = i;
            return Err(bad());
        }
    }
    if p == 0 || q == 0 {
        return Err(bad());
    }
    Ok((p, q))
}

/// Write a raw sample log (rows of t, state, action) in the transition CSV
/// format. Values round-trip bit-exactly through `load_csv`.
pub fn write_csv(
    path: &Path,
    times: &[f64],
    states: &Array,
    actions: &Array,
) -> Result<(), DataError> {
    let p = states.ncols();
    let q = actions.ncols();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("t");
    for c in 0..p {
        header.push_str(&format!(",x{}", c + 1));
    }
    for c in 0..q {
        header.push_str(&format!(",u{}", c + 1));
    }
    writeln!(out, "{header}")?;
    for (k, &t) in times.iter().enumerate() {
        let mut line = format!("{t}");
        for c in 0..p {
            line.push_str(&format!(",{}", states.get2(k, c)));
        }
        for c in 0..q {
            line.push_str(&format!(",{}", actions.get2(k, c)));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Population mean and std of the concatenated (state, action) columns.
pub fn fit_normalizer(dataset: &TransitionDataset) -> Normalizer {
    let n = dataset.len();
    assert!(n >= 2, "need at least 2 transitions to fit a normalizer");
    let p = dataset.state_dim();
    let q = dataset.action_dim();
    let d = p + q;
    let col = |c: usize, i: usize| -> f64 {
        if c < p {
            dataset.states.get2(i, c)
        } else {
            dataset.actions.get2(i, c - p)
        }
    };
    let mut mean = vec![0.0f64; d];
    let mut std = vec![0.0f64; d];
    let mut flagged = vec![false; d];
    for c in 0..d {
        let mut s = 0.0;
        for i in 0..n {
            s += col(c, i);
        }
        mean[c] = s / n as f64;
        let mut v = 0.0;
        for i in 0..n {
            let e = col(c, i) - mean[c];
            v += e * e;
        }
        std[c] = (v / n as f64).sqrt();
        if std[c] < STD_CLAMP {
            std[c] = 1.0;
            flagged[c] = true;
        }
    }
    Normalizer {
        mean,
        std,
        flagged,
        p,
        q,
    }
}

/// Standard deviation used to scale one target column, with the same
/// clamp-and-flag rule as input columns.
fn target_std(deltas: &[f64]) -> (f64, bool) {
    let n = deltas.len() as f64;
    let mean: f64 = deltas.iter().sum::<f64>() / n;
    let var: f64 = deltas.iter().map(|&d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_CLAMP {
        (1.0, true)
    } else {
        (std, false)
    }
}

/// Assemble normalized inputs and standardized difference targets.
pub fn build_training_pairs(dataset: &TransitionDataset, norm: &Normalizer) -> TrainingPairs {
    let n = dataset.len();
    let p = dataset.state_dim();
    let q = dataset.action_dim();
    let d = p + q;
    let mut inputs = vec![0.0f64; n * d];
    for i in 0..n {
        for c in 0..p {
            inputs[i * d + c] = norm.normalize_value(c, dataset.states.get2(i, c));
        }
        for c in 0..q {
            inputs[i * d + p + c] = norm.normalize_value(p + c, dataset.actions.get2(i, c));
        }
    }
    let mut targets = vec![0.0f64; n * p];
    let mut target_stds = vec![1.0f64; p];
    for m in 0..p {
        let deltas: Vec<f64> = (0..n)
            .map(|i| dataset.next_states.get2(i, m) - dataset.states.get2(i, m))
            .collect();
        let (std, _) = target_std(&deltas);
        target_stds[m] = std;
        for i in 0..n {
            targets[i * p + m] = deltas[i] / std;
        }
    }
    TrainingPairs {
        inputs: Array::matrix(n, d, inputs),
        targets: Array::matrix(n, p, targets),
        target_stds,
        p,
        q,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), content).unwrap();
        f
    }

    #[test]
    fn three_rows_two_transitions() {
        let f = write_temp("t,x1,u1\n0,1.0,0.1\n0.05,1.1,0.2\n0.10,1.3,0.3\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert!((ds.dt - 0.05).abs() < 1e-12);
        assert_eq!(ds.states.get2(0, 0), 1.0);
        assert_eq!(ds.next_states.get2(1, 0), 1.3);
    }

    #[test]
    fn gap_rule_skips_pairs() {
        let f = write_temp("t,x1,u1\n0,1,0\n0.05,2,0\n0.50,3,0\n0.55,4,0\n");
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.states.get2(0, 0), 1.0);
        assert_eq!(ds.states.get2(1, 0), 3.0);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let f = write_temp("t,x1,u1\n0,1,0\n0.05,zap,0\n0.1,2,0\n");
        match load_csv(f.path()) {
            Err(DataError::NonNumeric { line, value, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(value, "zap");
            }
            other => panic!("expected NonNumeric, got {other:?}"),
        }

        let f = write_temp("t,x1,u1\n0,1,0\n0.05,1\n");
        match load_csv(f.path()) {
            Err(DataError::ColumnCount { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected ColumnCount, got {other:?}"),
        }

        let f = write_temp("t,x1,u1\n0,1,0\n0.05,1,0\n");
        assert!(matches!(
            load_csv(f.path()),
            Err(DataError::TooFewRows { rows: 2 })
        ));

        let f = write_temp("t,x1,y1\n0,1,0\n0.05,1,0\n0.1,1,0\n");
        assert!(matches!(load_csv(f.path()), Err(DataError::BadHeader { .. })));

        // 4% deviation in dt, not a gap: inconsistent sampling.
        let f = write_temp("t,x1,u1\n0,1,0\n0.05,1,0\n0.102,1,0\n0.152,1,0\n");
        assert!(matches!(
            load_csv(f.path()),
            Err(DataError::InconsistentDt { .. })
        ));
    }

    #[test]
    fn normalizer_basics() {
        let ds = TransitionDataset {
            states: Array::matrix(2, 1, vec![1.0, 3.0]),
            actions: Array::matrix(2, 1, vec![5.0, 5.0]),
            next_states: Array::matrix(2, 1, vec![1.5, 3.5]),
            dt: 0.05,
        };
        let norm = fit_normalizer(&ds);
        assert_eq!(norm.mean[0], 2.0);
        assert_eq!(norm.std[0], 1.0);
        // constant action column: clamped and flagged
        assert_eq!(norm.mean[1], 5.0);
        assert_eq!(norm.std[1], 1.0);
        assert!(norm.flagged[1]);
        assert!(!norm.flagged[0]);
        // normalize(mean) = 0
        assert_eq!(norm.normalize_value(0, 2.0), 0.0);
        // round-trip
        let v = 1.2345678901234;
        let r = norm.denormalize_value(0, norm.normalize_value(0, v));
        assert!((r - v).abs() < 1e-12);
    }

    #[test]
    fn training_pairs_difference_targets() {
        let ds = TransitionDataset {
            states: Array::matrix(3, 1, vec![1.0, 1.2, 1.1]),
            actions: Array::matrix(3, 1, vec![0.1, -0.2, 0.3]),
            next_states: Array::matrix(3, 1, vec![1.2, 1.1, 1.4]),
            dt: 0.05,
        };
        let norm = fit_normalizer(&ds);
        let pairs = build_training_pairs(&ds, &norm);
        // raw deltas 0.2, -0.1, 0.3, scaled by their population std
        let raw = [0.2, -0.1, 0.3];
        let mean: f64 = raw.iter().sum::<f64>() / 3.0;
        let std = (raw.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / 3.0).sqrt();
        assert!((pairs.target_stds[0] - std).abs() < 1e-15);
        for i in 0..3 {
            assert!((pairs.targets.get2(i, 0) - raw[i] / std).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_states_zero_target() {
        let ds = TransitionDataset {
            states: Array::matrix(3, 1, vec![1.0, 2.0, 1.0]),
            actions: Array::matrix(3, 1, vec![0.0, 0.5, 1.0]),
            next_states: Array::matrix(3, 1, vec![1.0, 2.5, 1.0]),
            dt: 0.05,
        };
        let norm = fit_normalizer(&ds);
        let pairs = build_training_pairs(&ds, &norm);
        assert_eq!(pairs.targets.get2(0, 0), 0.0);
        assert_eq!(pairs.targets.get2(2, 0), 0.0);
    }

    #[test]
    fn normalized_columns_are_standardized() {
        let mut rng = crate::rng::StreamRng::new(3, "data");
        let n = 500;
        let states: Vec<f64> = (0..n * 2).map(|_| rng.next_normal() * 3.0 + 1.0).collect();
        let actions: Vec<f64> = (0..n).map(|_| rng.next_normal() * 0.5 - 0.2).collect();
        let next: Vec<f64> = states.iter().map(|&x| x + 0.1).collect();
        let ds = TransitionDataset {
            states: Array::matrix(n, 2, states),
            actions: Array::matrix(n, 1, actions),
            next_states: Array::matrix(n, 2, next),
            dt: 0.05,
        };
        let norm = fit_normalizer(&ds);
        let pairs = build_training_pairs(&ds, &norm);
        for c in 0..3 {
            let col: Vec<f64> = (0..n).map(|i| pairs.inputs.get2(i, c)).collect();
            let mean: f64 = col.iter().sum::<f64>() / n as f64;
            let var: f64 = col.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-10, "col {c} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-10, "col {c} std");
        }
    }

    #[test]
    fn csv_roundtrip_is_bit_exact() {
        let mut rng = crate::rng::StreamRng::new(17, "roundtrip");
        let n = 50;
        let times: Vec<f64> = (0..n).map(|k| k as f64 * 0.05).collect();
        let states = Array::matrix(n, 2, (0..n * 2).map(|_| rng.next_normal()).collect());
        let actions = Array::matrix(n, 1, (0..n).map(|_| rng.next_normal()).collect());
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(f.path(), &times, &states, &actions).unwrap();
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.len(), n - 1);
        for i in 0..n - 1 {
            assert_eq!(ds.states.get2(i, 0), states.get2(i, 0));
            assert_eq!(ds.states.get2(i, 1), states.get2(i, 1));
            assert_eq!(ds.actions.get2(i, 0), actions.get2(i, 0));
            assert_eq!(ds.next_states.get2(i, 0), states.get2(i + 1, 0));
        }
        // write -> load -> write produces identical bytes
        let f2 = tempfile::NamedTempFile::new().unwrap();
        write_csv(f2.path(), &times, &states, &actions).unwrap();
        assert_eq!(
            std::fs::read(f.path()).unwrap(),
            std::fs::read(f2.path()).unwrap()
        );
    }

    #[test]
    fn transition_count_accounting() {
        // 10 rows, one gap: 10 - 1 - 1 = 8 transitions
        let mut content = String::from("t,x1,u1\n");
        let mut t = 0.0;
        for k in 0..10 {
            if k == 5 {
                t += 1.0; // gap
            }
            content.push_str(&format!("{t},{k},0\n"));
            t += 0.05;
        }
        let f = write_temp(&content);
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.len(), 8);
    }
}
