//! Observation storage, CSV ingestion, role binding and cross-fitting folds.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which columns play which part in the observation `Z`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Roles {
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub treatment: Option<String>,
    #[serde(default)]
    pub outcome: Option<String>,
    #[serde(default)]
    pub time: Option<String>,
    #[serde(default)]
    pub event: Option<String>,
}

impl Roles {
    fn referenced(&self) -> impl Iterator<Item = &String> {
        self.covariates.iter().chain(
            [&self.treatment, &self.outcome, &self.time, &self.event]
                .into_iter()
                .flatten(),
        )
    }
}

#[derive(Debug, Clone, Default)]
struct BoundRoles {
    treatment: Option<usize>,
    outcome: Option<usize>,
    time: Option<usize>,
    event: Option<usize>,
}

/// Column store of `n` observations with bound roles.
///
/// Columns are dense `f64` vectors of equal length. Role invariants (binary
/// treatment and event, positive integer times) are checked on construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    n: usize,
    roles: Roles,
    bound: BoundRoles,
}

impl Dataset {
    pub fn new(columns: Vec<(String, Vec<f64>)>, roles: Roles) -> Result<Self> {
        let n = columns.first().map(|c| c.1.len()).unwrap_or(0);
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut names = Vec::with_capacity(columns.len());
        let mut data = Vec::with_capacity(columns.len());
        let mut index = HashMap::new();
        for (name, values) in columns {
            if values.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: values.len(),
                });
            }
            if let Some(row) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonNumericCell {
                    row,
                    column: name,
                    value: values[row].to_string(),
                });
            }
            index.insert(name.clone(), names.len());
            names.push(name);
            data.push(values);
        }
        let mut ds = Dataset {
            names,
            columns: data,
            index,
            n,
            roles: Roles::default(),
            bound: BoundRoles::default(),
        };
        ds.bind(roles)?;
        Ok(ds)
    }

    /// Rebinds roles, re-validating the role invariants.
    pub fn bind(&mut self, roles: Roles) -> Result<()> {
        for name in roles.referenced() {
            self.column_index(name)?;
        }
        let lookup = |r: &Option<String>| -> Result<Option<usize>> {
            r.as_ref().map(|c| self.column_index(c)).transpose()
        };
        let bound = BoundRoles {
            treatment: lookup(&roles.treatment)?,
            outcome: lookup(&roles.outcome)?,
            time: lookup(&roles.time)?,
            event: lookup(&roles.event)?,
        };
        for col in [bound.treatment, bound.event].into_iter().flatten() {
            if let Some((row, &v)) = self.columns[col]
                .iter()
                .enumerate()
                .find(|(_, &v)| v != 0.0 && v != 1.0)
            {
                return Err(Error::InvalidBinary {
                    column: self.names[col].clone(),
                    row,
                    value: v,
                });
            }
        }
        if let Some(col) = bound.time {
            if let Some((row, &v)) = self.columns[col]
                .iter()
                .enumerate()
                .find(|(_, &v)| v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64)
            {
                return Err(Error::InvalidTime {
                    column: self.names[col].clone(),
                    row,
                    value: v,
                });
            }
        }
        self.roles = roles;
        self.bound = bound;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.columns[self.column_index(name)?])
    }

    /// Appends a derived column (e.g. an oracle nuisance value).
    pub fn add_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: values.len(),
            });
        }
        if self.index.contains_key(name) {
            return Err(Error::InvalidConfig(format!("column `{name}` already exists")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.columns.push(values);
        Ok(())
    }

    /// Copy of the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let cols = self
            .names
            .iter()
            .zip(&self.columns)
            .map(|(name, c)| (name.clone(), rows.iter().map(|&r| c[r]).collect()))
            .collect();
        Dataset::new(cols, self.roles.clone())
    }

    pub fn obs(&self, row: usize) -> Obs<'_> {
        Obs {
            data: self,
            row,
            treatment: None,
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Csv(e.to_string());
        wtr.write_record(&self.names).map_err(csv_err)?;
        for row in 0..self.n {
            wtr.write_record(self.columns.iter().map(|c| format!("{}", c[row])))
                .map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| Error::Csv(e.to_string()))
    }
}

/// Reads a header-first, comma-separated numeric table.
pub fn load_csv(path: impl AsRef<Path>, roles: Roles) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    read_csv(file, roles)
}

pub fn read_csv<R: Read>(reader: R, roles: Roles) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    for name in roles.referenced() {
        if !headers.contains(name) {
            return Err(Error::MissingColumn(name.clone()));
        }
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                Error::NonNumericCell {
                    row,
                    column: headers[j].clone(),
                    value: cell.to_string(),
                }
            })?;
            columns[j].push(v);
        }
    }
    Dataset::new(headers.into_iter().zip(columns).collect(), roles)
}

/// One observation, optionally with its treatment replaced by a
/// counterfactual value.
#[derive(Debug, Clone, Copy)]
pub struct Obs<'a> {
    data: &'a Dataset,
    row: usize,
    treatment: Option<f64>,
}

impl<'a> Obs<'a> {
    pub fn row(&self) -> usize {
        self.row
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.data
    }

    pub fn with_treatment(self, a: f64) -> Self {
        Obs {
            treatment: Some(a),
            ..self
        }
    }

    /// Value of column `col`, honouring a counterfactual treatment override.
    pub fn value(&self, col: usize) -> f64 {
        match self.treatment {
            Some(a) if self.data.bound.treatment == Some(col) => a,
            _ => self.data.columns[col][self.row],
        }
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        let col = self
            .data
            .index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingCovariate(name.to_string()))?;
        Ok(self.value(col))
    }

    fn role(&self, col: Option<usize>, role: &str) -> Result<f64> {
        col.map(|c| self.value(c))
            .ok_or_else(|| Error::MissingColumn(format!("<{role} role>")))
    }

    pub fn treatment(&self) -> Result<f64> {
        self.role(self.data.bound.treatment, "treatment")
    }

    pub fn outcome(&self) -> Result<f64> {
        self.role(self.data.bound.outcome, "outcome")
    }

    pub fn time(&self) -> Result<u32> {
        Ok(self.role(self.data.bound.time, "time")? as u32)
    }

    pub fn event(&self) -> Result<bool> {
        Ok(self.role(self.data.bound.event, "event")? == 1.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Fold `s` is trained on every row outside fold `s`.
    #[default]
    CrossFit,
    /// A single fold trained and evaluated on all rows.
    InSample,
    /// A single fold trained on unassigned rows, evaluated on assigned ones.
    Split,
}

/// Assignment of rows to cross-fitting folds.
///
/// Fold indices are zero-based. Rows with no fold are training-only
/// (sample-splitting mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    folds: usize,
    assignment: Vec<Option<usize>>,
    seed: u64,
    mode: PlanMode,
}

/// Seeded Fisher–Yates shuffle followed by round-robin dealing.
pub fn make_folds(n: usize, folds: usize, seed: u64) -> Result<CrossFitPlan> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidFoldCount { n, folds });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![None; n];
    for (pos, &row) in perm.iter().enumerate() {
        assignment[row] = Some(pos % folds);
    }
    Ok(CrossFitPlan {
        folds,
        assignment,
        seed,
        mode: PlanMode::CrossFit,
    })
}

/// [`make_folds`] over a subset of the rows of an `n`-row dataset; the
/// other rows take part in no fold.
pub fn make_folds_on(n: usize, rows: &[usize], folds: usize, seed: u64) -> Result<CrossFitPlan> {
    let sub = make_folds(rows.len(), folds, seed)?;
    let mut assignment = vec![None; n];
    for (k, &row) in rows.iter().enumerate() {
        assignment[row] = sub.assignment[k];
    }
    Ok(CrossFitPlan {
        folds,
        assignment,
        seed,
        mode: PlanMode::CrossFit,
    })
}

/// Like [`make_folds`] but deals each stratum (distinct value of `strata`)
/// in turn, continuing the round robin across strata.
pub fn make_folds_stratified(strata: &[f64], folds: usize, seed: u64) -> Result<CrossFitPlan> {
    let n = strata.len();
    if folds < 2 || folds > n {
        return Err(Error::InvalidFoldCount { n, folds });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels: Vec<f64> = strata.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut assignment = vec![None; n];
    let mut pos = 0usize;
    for level in levels {
        let mut rows: Vec<usize> = (0..n).filter(|&i| strata[i] == level).collect();
        rows.shuffle(&mut rng);
        for row in rows {
            assignment[row] = Some(pos % folds);
            pos += 1;
        }
    }
    Ok(CrossFitPlan {
        folds,
        assignment,
        seed,
        mode: PlanMode::CrossFit,
    })
}

impl CrossFitPlan {
    /// No cross-fitting: every fit sees every row.
    pub fn in_sample(n: usize) -> Self {
        CrossFitPlan {
            folds: 1,
            assignment: vec![Some(0); n],
            seed: 0,
            mode: PlanMode::InSample,
        }
    }

    /// Sample splitting: fits use `train`, estimates are computed on `eval`.
    pub fn split(n: usize, train: &[usize], eval: &[usize]) -> Result<Self> {
        let mut assignment = vec![None; n];
        for &i in eval {
            assignment[i] = Some(0);
        }
        if train.iter().any(|&i| assignment[i].is_some()) {
            return Err(Error::InvalidConfig("train and eval rows overlap".into()));
        }
        if train.is_empty() || eval.is_empty() {
            return Err(Error::InvalidConfig("empty split".into()));
        }
        Ok(CrossFitPlan {
            folds: 1,
            assignment,
            seed: 0,
            mode: PlanMode::Split,
        })
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> PlanMode {
        self.mode
    }

    pub fn assignment(&self) -> &[Option<usize>] {
        &self.assignment
    }

    pub fn fold_of(&self, row: usize) -> Option<usize> {
        self.assignment[row]
    }

    /// Rows whose estimates are produced by fold `s`'s fits.
    pub fn eval_rows(&self, s: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.assignment[i] == Some(s))
            .collect()
    }

    /// Rows every fold contributes to the final estimate, in row order.
    pub fn all_eval_rows(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.assignment[i].is_some())
            .collect()
    }

    /// Fold whose fits serve `row`. Training-only rows of a single-fold
    /// plan map to fold 0.
    pub fn fold_for(&self, row: usize) -> Option<usize> {
        match self.assignment[row] {
            Some(s) => Some(s),
            None if self.folds == 1 => Some(0),
            None => None,
        }
    }

    /// Rows used to train fold `s`'s fits.
    pub fn train_rows(&self, s: usize) -> Vec<usize> {
        match self.mode {
            PlanMode::CrossFit => (0..self.n())
                .filter(|&i| matches!(self.assignment[i], Some(t) if t != s))
                .collect(),
            PlanMode::InSample => (0..self.n()).collect(),
            PlanMode::Split => (0..self.n())
                .filter(|&i| self.assignment[i].is_none())
                .collect(),
        }
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for s in self.assignment.iter().flatten() {
            sizes[*s] += 1;
        }
        sizes
    }
}
