//! Observational datasets `(Z, T, Y)` and their CSV form.
//!
//! The CSV dialect is fixed: comma separated, a header row, `.` decimals,
//! UTF-8, and no missing values. Columns are matched to the schema by name.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Covariate,
    Treatment,
    Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    Continuous,
    Discrete,
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "covariate" => Ok(Role::Covariate),
            "treatment" => Ok(Role::Treatment),
            "outcome" => Ok(Role::Outcome),
            other => Err(Error::Schema(format!("unknown column role `{other}`"))),
        }
    }
}

impl FromStr for Kind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" => Ok(Kind::Continuous),
            "discrete" => Ok(Kind::Discrete),
            other => Err(Error::Schema(format!("unknown column kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: Role,
    pub kind: Kind,
}

/// Column roles and kinds: one binary treatment, one outcome and at least
/// one covariate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

/// Columns with at most this many distinct values are treated as discrete
/// when the schema does not say otherwise.
pub const AUTO_DISCRETE_LEVELS: usize = 20;

impl Schema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let s = Self { columns };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let count = |r: Role| self.columns.iter().filter(|c| c.role == r).count();
        if count(Role::Treatment) != 1 {
            return Err(Error::Schema(format!("expected exactly one treatment column, found {}", count(Role::Treatment))));
        }
        if count(Role::Outcome) != 1 {
            return Err(Error::Schema(format!("expected exactly one outcome column, found {}", count(Role::Outcome))));
        }
        if count(Role::Covariate) == 0 {
            return Err(Error::Schema("at least one covariate column is required".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(())
    }

    /// Covariates named `z1..zD` followed by `t` and `y`.
    pub fn standard(discrete: &[bool]) -> Self {
        let mut columns: Vec<ColumnSpec> = discrete
            .iter()
            .enumerate()
            .map(|(i, &d)| ColumnSpec {
                name: format!("z{}", i + 1),
                role: Role::Covariate,
                kind: if d { Kind::Discrete } else { Kind::Continuous },
            })
            .collect();
        columns.push(ColumnSpec { name: "t".into(), role: Role::Treatment, kind: Kind::Discrete });
        columns.push(ColumnSpec { name: "y".into(), role: Role::Outcome, kind: Kind::Continuous });
        Self { columns }
    }

    fn column(&self, role: Role) -> &ColumnSpec {
        self.columns.iter().find(|c| c.role == role).expect("validated schema")
    }

    pub fn treatment(&self) -> &str {
        &self.column(Role::Treatment).name
    }

    pub fn outcome(&self) -> &str {
        &self.column(Role::Outcome).name
    }

    pub fn covariates(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.role == Role::Covariate)
    }
}

/// Covariates are stored column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub covariate_names: Vec<String>,
    pub discrete: Vec<bool>,
    pub z: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub treatment_name: String,
    pub outcome_name: String,
}

impl Dataset {
    /// Builds a dataset with standard column names `z1..zD, t, y`.
    pub fn new(z: Vec<Vec<f64>>, t: Vec<f64>, y: Vec<f64>, discrete: Vec<bool>) -> Result<Self> {
        let names = (1..=z.len()).map(|i| format!("z{i}")).collect();
        Self::with_names(names, z, t, y, discrete, "t".into(), "y".into())
    }

    pub fn with_names(
        covariate_names: Vec<String>,
        z: Vec<Vec<f64>>,
        t: Vec<f64>,
        y: Vec<f64>,
        discrete: Vec<bool>,
        treatment_name: String,
        outcome_name: String,
    ) -> Result<Self> {
        let n = t.len();
        if y.len() != n || z.iter().any(|c| c.len() != n) {
            return Err(Error::Dimension("covariate, treatment and outcome lengths differ".into()));
        }
        if covariate_names.len() != z.len() || discrete.len() != z.len() {
            return Err(Error::Dimension("one name and kind is needed per covariate".into()));
        }
        if let Some(row) = t.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Schema(format!("treatment must be 0 or 1; row {} has {}", row, t[row])));
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericRow { what: "outcome", row });
        }
        for col in &z {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericRow { what: "covariate", row });
            }
        }
        Ok(Self { covariate_names, discrete, z, t, y, treatment_name, outcome_name })
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.z.len()
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn treatment_strata(&self) -> Vec<u8> {
        self.t.iter().map(|&v| v as u8).collect()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.z.iter().map(|c| c[i]).collect()
    }

    pub fn schema(&self) -> Schema {
        let mut columns: Vec<ColumnSpec> = self
            .covariate_names
            .iter()
            .zip(&self.discrete)
            .map(|(name, &d)| ColumnSpec {
                name: name.clone(),
                role: Role::Covariate,
                kind: if d { Kind::Discrete } else { Kind::Continuous },
            })
            .collect();
        columns.push(ColumnSpec { name: self.treatment_name.clone(), role: Role::Treatment, kind: Kind::Discrete });
        columns.push(ColumnSpec { name: self.outcome_name.clone(), role: Role::Outcome, kind: Kind::Continuous });
        Schema { columns }
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            covariate_names: self.covariate_names.clone(),
            discrete: self.discrete.clone(),
            z: self.z.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            treatment_name: self.treatment_name.clone(),
            outcome_name: self.outcome_name.clone(),
        }
    }

    /// Parses CSV text. Without a schema, `t` and `y` are the treatment and
    /// outcome, every other column is a covariate, and covariates with at
    /// most [`AUTO_DISCRETE_LEVELS`] distinct values are marked discrete.
    pub fn read_csv<R: Read>(reader: R, schema: Option<&Schema>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if header.is_empty() || header.iter().all(|h| h.is_empty()) {
            return Err(Error::Parse { line: 1, msg: "missing header row".into() });
        }
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map(|p| p.line() as usize).unwrap_or(line),
                msg: e.to_string(),
            })?;
            for (j, field) in rec.iter().enumerate() {
                let field = field.trim();
                if field.is_empty() {
                    return Err(Error::Parse { line, msg: format!("missing value in column `{}`", header[j]) });
                }
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Parse { line, msg: format!("`{field}` in column `{}` is not a number", header[j]) })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, msg: format!("non-finite value in column `{}`", header[j]) });
                }
                columns[j].push(v);
            }
        }

        let owned;
        let schema = match schema {
            Some(s) => s,
            None => {
                owned = infer_schema(&header, &columns)?;
                &owned
            }
        };
        schema.validate()?;
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("column `{name}` is missing from the CSV header")))
        };
        for h in &header {
            if !schema.columns.iter().any(|c| &c.name == h) {
                return Err(Error::Schema(format!("CSV column `{h}` is not in the schema")));
            }
        }
        let t = columns[find(schema.treatment())?].clone();
        let y = columns[find(schema.outcome())?].clone();
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        let mut z = Vec::new();
        for c in schema.covariates() {
            z.push(columns[find(&c.name)?].clone());
            names.push(c.name.clone());
            kinds.push(c.kind == Kind::Discrete);
        }
        Self::with_names(names, z, t, y, kinds, schema.treatment().to_string(), schema.outcome().to_string())
    }

    pub fn read_csv_path(path: &Path, schema: Option<&Schema>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, schema)
    }

    /// Writes the header `covariates..., treatment, outcome` and one row per
    /// unit. Values use Rust's shortest round-trip formatting, so reading
    /// the file back reproduces every value exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.covariate_names.iter().map(String::as_str).collect();
        header.push(&self.treatment_name);
        header.push(&self.outcome_name);
        w.write_record(&header).map_err(csv_io)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            record.clear();
            record.extend(self.z.iter().map(|c| c[i].to_string()));
            record.push(self.t[i].to_string());
            record.push(self.y[i].to_string());
            w.write_record(&record).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn infer_schema(header: &[String], columns: &[Vec<f64>]) -> Result<Schema> {
    let mut specs = Vec::with_capacity(header.len());
    for (name, col) in header.iter().zip(columns) {
        let role = match name.as_str() {
            "t" => Role::Treatment,
            "y" => Role::Outcome,
            _ => Role::Covariate,
        };
        let kind = if role == Role::Covariate {
            let levels: BTreeSet<u64> = col.iter().map(|v| v.to_bits()).collect();
            if levels.len() <= AUTO_DISCRETE_LEVELS {
                log::warn!("column `{name}` has {} distinct values; treating it as discrete", levels.len());
                Kind::Discrete
            } else {
                Kind::Continuous
            }
        } else if role == Role::Treatment {
            Kind::Discrete
        } else {
            Kind::Continuous
        };
        specs.push(ColumnSpec { name: name.clone(), role, kind });
    }
    Schema::new(specs)
}
