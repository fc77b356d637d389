//! Tabular study data: CSV loading, column typing, subsetting, list-wise
//! deletion and scalar column transforms.
//!
//! A [`Dataset`] is immutable. Every operation returns a new dataset; rows keep
//! the `row_id` they were assigned at load time, so filtered views can always be
//! traced back to the original file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MetaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Real,
    Categorical,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Real(Vec<Option<f64>>),
    /// `levels` are sorted by code point; `codes` index into them.
    Categorical {
        levels: Vec<String>,
        codes: Vec<Option<usize>>,
    },
    Text(Vec<Option<String>>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Real(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
            Column::Text(v) => v.len(),
        }
    }

    pub fn column_type(&self) -> ColumnType {
        match self {
            Column::Real(_) => ColumnType::Real,
            Column::Categorical { .. } => ColumnType::Categorical,
            Column::Text(_) => ColumnType::Text,
        }
    }

    pub fn is_missing(&self, i: usize) -> bool {
        match self {
            Column::Real(v) => v[i].is_none(),
            Column::Categorical { codes, .. } => codes[i].is_none(),
            Column::Text(v) => v[i].is_none(),
        }
    }

    /// Render the cell at position `i` as text (`None` when missing).
    pub fn render(&self, i: usize) -> Option<String> {
        match self {
            Column::Real(v) => v[i].map(format_real),
            Column::Categorical { levels, codes } => codes[i].map(|c| levels[c].clone()),
            Column::Text(v) => v[i].clone(),
        }
    }

    fn select(&self, positions: &[usize]) -> Column {
        match self {
            Column::Real(v) => Column::Real(positions.iter().map(|&i| v[i]).collect()),
            Column::Categorical { levels, codes } => Column::Categorical {
                levels: levels.clone(),
                codes: positions.iter().map(|&i| codes[i]).collect(),
            },
            Column::Text(v) => Column::Text(positions.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

fn format_real(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// True for the encodings treated as missing: empty, `NA`, `NaN` (any case).
pub fn is_missing_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
    row_ids: Vec<usize>,
}

/// Result of list-wise deletion over a set of required columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompleteCaseReport {
    pub kept_row_ids: Vec<usize>,
    pub n_omitted: usize,
    /// First required column found missing for each omitted row.
    pub omitted_reasons: BTreeMap<usize, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarTransform {
    Sqrt,
    Square,
    Log,
    Exp,
}

impl ScalarTransform {
    fn apply(self, x: f64) -> Option<f64> {
        let y = match self {
            ScalarTransform::Sqrt if x < 0.0 => return None,
            ScalarTransform::Sqrt => x.sqrt(),
            ScalarTransform::Square => x * x,
            ScalarTransform::Log if x <= 0.0 => return None,
            ScalarTransform::Log => x.ln(),
            ScalarTransform::Exp => x.exp(),
        };
        y.is_finite().then_some(y)
    }
}

impl Dataset {
    /// Build a dataset from named columns; row ids are `0..k`.
    pub fn new(names: Vec<String>, columns: Vec<Column>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(MetaError::schema(
                "column name count does not match column count",
            ));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(MetaError::schema(format!("duplicate column name '{n}'")));
            }
        }
        let k = columns.first().map_or(0, Column::len);
        if columns.iter().any(|c| c.len() != k) {
            return Err(MetaError::schema("columns have unequal lengths"));
        }
        Ok(Dataset {
            names,
            columns,
            row_ids: (0..k).collect(),
        })
    }

    pub fn load_csv(
        path: impl AsRef<Path>,
        type_hints: &HashMap<String, ColumnType>,
    ) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_reader(file, type_hints)
    }

    /// Parse RFC-4180 CSV with a mandatory header row.
    pub fn from_reader<R: Read>(
        reader: R,
        type_hints: &HashMap<String, ColumnType>,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(csv_error)?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut seen = BTreeSet::new();
        for h in &headers {
            if !seen.insert(h.clone()) {
                return Err(MetaError::schema(format!("duplicate header '{h}'")));
            }
        }
        let mut raw: Vec<Vec<Option<String>>> = vec![Vec::new(); headers.len()];
        let mut lines: Vec<u64> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_error)?;
            lines.push(rec.position().map_or(0, |p| p.line()));
            for (j, field) in rec.iter().enumerate() {
                raw[j].push(if is_missing_token(field) {
                    None
                } else {
                    Some(field.trim().to_string())
                });
            }
        }
        let mut columns = Vec::with_capacity(headers.len());
        for (name, values) in headers.iter().zip(raw) {
            columns.push(type_column(
                name,
                values,
                type_hints.get(name).copied(),
                &lines,
            )?);
        }
        Dataset::new(headers, columns)
    }

    pub fn nrows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| &self.columns[j])
            .ok_or_else(|| MetaError::schema(format!("unknown column '{name}'")))
    }

    pub fn column_type(&self, name: &str) -> Result<ColumnType> {
        Ok(self.column(name)?.column_type())
    }

    /// Values of a real-typed column.
    pub fn real(&self, name: &str) -> Result<&[Option<f64>]> {
        match self.column(name)? {
            Column::Real(v) => Ok(v),
            other => Err(MetaError::schema(format!(
                "column '{name}' is {:?}, expected real",
                other.column_type()
            ))),
        }
    }

    /// Text rendering of every cell in a column.
    pub fn labels(&self, name: &str) -> Result<Vec<Option<String>>> {
        let c = self.column(name)?;
        Ok((0..self.nrows()).map(|i| c.render(i)).collect())
    }

    /// Levels of a categorical column, in reference-coding order.
    pub fn levels(&self, name: &str) -> Result<&[String]> {
        match self.column(name)? {
            Column::Categorical { levels, .. } => Ok(levels),
            _ => Err(MetaError::schema(format!(
                "column '{name}' is not categorical"
            ))),
        }
    }

    /// Keep the rows at the given positions (not row ids), preserving row ids.
    pub fn select_positions(&self, positions: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.select(positions)).collect(),
            row_ids: positions.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }

    /// Keep the rows whose ids appear in `ids`, in dataset order.
    pub fn select_row_ids(&self, ids: &[usize]) -> Dataset {
        let wanted: BTreeSet<usize> = ids.iter().copied().collect();
        let positions: Vec<usize> = (0..self.nrows())
            .filter(|&i| wanted.contains(&self.row_ids[i]))
            .collect();
        self.select_positions(&positions)
    }

    /// Append a real column; a name collision is a schema error.
    pub fn with_real_column(&self, name: &str, values: Vec<Option<f64>>) -> Result<Dataset> {
        if self.has_column(name) {
            return Err(MetaError::schema(format!("column '{name}' already exists")));
        }
        if values.len() != self.nrows() {
            return Err(MetaError::schema(format!(
                "column '{name}' has wrong length"
            )));
        }
        let mut d = self.clone();
        d.names.push(name.to_string());
        d.columns.push(Column::Real(values));
        Ok(d)
    }

    /// Like [`Dataset::with_real_column`] but overwrites an existing column.
    pub fn set_real_column(&self, name: &str, values: Vec<Option<f64>>) -> Result<Dataset> {
        if values.len() != self.nrows() {
            return Err(MetaError::schema(format!(
                "column '{name}' has wrong length"
            )));
        }
        let mut d = self.clone();
        match d.names.iter().position(|n| n == name) {
            Some(j) => d.columns[j] = Column::Real(values),
            None => {
                d.names.push(name.to_string());
                d.columns.push(Column::Real(values));
            }
        }
        Ok(d)
    }

    /// Rows whose value in `column` is one of `allowed`. Real columns compare
    /// numerically, everything else by rendered text. Missing never matches.
    pub fn apply_subset(&self, column: &str, allowed: &[String]) -> Result<Dataset> {
        let col = self.column(column)?;
        let keep: Vec<usize> = match col {
            Column::Real(v) => {
                let nums: Vec<f64> = allowed
                    .iter()
                    .filter_map(|s| s.trim().parse::<f64>().ok())
                    .collect();
                (0..self.nrows())
                    .filter(|&i| v[i].is_some_and(|x| nums.contains(&x)))
                    .collect()
            }
            _ => {
                let set: BTreeSet<&str> = allowed.iter().map(String::as_str).collect();
                (0..self.nrows())
                    .filter(|&i| col.render(i).is_some_and(|s| set.contains(s.as_str())))
                    .collect()
            }
        };
        Ok(self.select_positions(&keep))
    }

    /// List-wise deletion report over `required` columns.
    pub fn complete_cases(&self, required: &[&str]) -> Result<CompleteCaseReport> {
        let cols: Vec<(&str, &Column)> = required
            .iter()
            .map(|&n| self.column(n).map(|c| (n, c)))
            .collect::<Result<_>>()?;
        let mut kept = Vec::new();
        let mut reasons = BTreeMap::new();
        for i in 0..self.nrows() {
            match cols.iter().find(|(_, c)| c.is_missing(i)) {
                Some((name, _)) => {
                    reasons.insert(self.row_ids[i], name.to_string());
                }
                None => kept.push(self.row_ids[i]),
            }
        }
        Ok(CompleteCaseReport {
            n_omitted: self.nrows() - kept.len(),
            kept_row_ids: kept,
            omitted_reasons: reasons,
        })
    }

    /// Apply `f` elementwise to a real column, writing `target`. Returns the new
    /// dataset and the number of domain violations (which become missing).
    pub fn transform_column(
        &self,
        source: &str,
        f: ScalarTransform,
        target: &str,
    ) -> Result<(Dataset, usize)> {
        if self.has_column(target) {
            return Err(MetaError::schema(format!(
                "target column '{target}' already exists"
            )));
        }
        let src = self.real(source)?;
        let mut violations = 0;
        let out = src
            .iter()
            .map(|x| {
                x.and_then(|x| {
                    let y = f.apply(x);
                    if y.is_none() {
                        violations += 1;
                    }
                    y
                })
            })
            .collect();
        Ok((self.with_real_column(target, out)?, violations))
    }

    /// Write the dataset as CSV; missing values are written as `NA`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
        w.write_record(&self.names).map_err(csv_error)?;
        for i in 0..self.nrows() {
            let rec: Vec<String> = self
                .columns
                .iter()
                .map(|c| match c {
                    Column::Real(v) => v[i].map_or_else(|| "NA".to_string(), |x| format!("{x}")),
                    _ => c.render(i).unwrap_or_else(|| "NA".to_string()),
                })
                .collect();
            w.write_record(&rec).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> MetaError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MetaError::Io(io),
        kind => MetaError::Parse {
            line,
            msg: format!("{kind:?}"),
        },
    }
}

fn type_column(
    name: &str,
    values: Vec<Option<String>>,
    hint: Option<ColumnType>,
    lines: &[u64],
) -> Result<Column> {
    let numeric = || -> std::result::Result<Vec<Option<f64>>, usize> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                None => Ok(None),
                Some(s) => s.parse::<f64>().map(Some).map_err(|_| i),
            })
            .collect()
    };
    match hint {
        Some(ColumnType::Real) => numeric().map(Column::Real).map_err(|i| MetaError::Parse {
            line: lines.get(i).copied().unwrap_or(0),
            msg: format!(
                "column '{name}' is declared real but holds '{}'",
                values[i].as_deref().unwrap_or("")
            ),
        }),
        Some(ColumnType::Text) => Ok(Column::Text(values)),
        Some(ColumnType::Categorical) => Ok(categorical(values)),
        None => match numeric() {
            Ok(v) => Ok(Column::Real(v)),
            Err(_) => Ok(categorical(values)),
        },
    }
}

fn categorical(values: Vec<Option<String>>) -> Column {
    let levels: Vec<String> = values
        .iter()
        .flatten()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let codes = values
        .iter()
        .map(|v| {
            v.as_ref()
                .map(|s| levels.binary_search(s).expect("level present"))
        })
        .collect();
    Column::Categorical { levels, codes }
}
