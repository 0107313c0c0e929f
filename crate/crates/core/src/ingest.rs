//! Cohort file loading, biomarker preprocessing and the binary sidecar matrix format.
//!
//! A cohort file is comma-separated UTF-8 text with a header row. A schema assigns each
//! column used by the pipeline one role; columns the schema does not mention are ignored.
//! Schema files hold one `column,role` pair per line, `#` starts a comment.
//!
//! Sidecar matrices are little-endian: `u32 rows`, `u32 cols`, then `rows * cols` `f32`
//! values in row-major order. Their rows are keyed by an id list file, one patient id per
//! line.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::{self, Matrix};
use crate::prior::average_scan_embeddings;

const MISSING_TOKENS: [&str; 6] = ["", "na", "nan", "null", "none", "?"];
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Id,
    Label,
    Numeric,
    Categorical,
    Embedding,
    Feature,
}

impl ColumnRole {
    fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "id" => ColumnRole::Id,
            "label" => ColumnRole::Label,
            "numeric" => ColumnRole::Numeric,
            "categorical" => ColumnRole::Categorical,
            "embedding" => ColumnRole::Embedding,
            "feature" => ColumnRole::Feature,
            _ => return None,
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            ColumnRole::Id => "id",
            ColumnRole::Label => "label",
            ColumnRole::Numeric => "numeric",
            ColumnRole::Categorical => "categorical",
            ColumnRole::Embedding => "embedding",
            ColumnRole::Feature => "feature",
        }
    }
}

/// Column-role map. Column order within a role is the order columns were declared.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Schema {
    columns: Vec<(String, ColumnRole)>,
}

impl Schema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, column: impl Into<String>, role: ColumnRole) -> Self {
        self.columns.push((column.into(), role));
        self
    }

    pub fn columns(&self) -> &[(String, ColumnRole)] {
        &self.columns
    }

    fn names(&self, role: ColumnRole) -> Vec<String> {
        self.columns
            .iter()
            .filter(|(_, r)| *r == role)
            .map(|(n, _)| n.clone())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, _) in &self.columns {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("column {name:?} declared twice")));
            }
        }
        for role in [ColumnRole::Id, ColumnRole::Label] {
            let n = self.columns.iter().filter(|(_, r)| *r == role).count();
            if n != 1 {
                return Err(Error::Schema(format!(
                    "exactly one {} column required, found {n}",
                    role.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut schema = Schema::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, role) = line.split_once(',').ok_or_else(|| Error::Parse {
                line: lineno as u64 + 1,
                message: format!("expected `column,role`, got {line:?}"),
            })?;
            let role = ColumnRole::parse(role).ok_or_else(|| Error::Parse {
                line: lineno as u64 + 1,
                message: format!("unknown role {:?}", role.trim()),
            })?;
            schema.columns.push((name.trim().to_string(), role));
        }
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.columns
            .iter()
            .map(|(n, r)| format!("{n},{}\n", r.as_str()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub patient_id: String,
    pub label: u8,
    /// `None` marks a missing cell.
    pub numeric: Vec<Option<f64>>,
    pub categorical: Vec<String>,
    pub embedding: Option<Vec<f64>>,
    pub feature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCohortFile {
    pub numeric_names: Vec<String>,
    pub categorical_names: Vec<String>,
    pub embedding_names: Vec<String>,
    pub feature_names: Vec<String>,
    pub rows: Vec<RawRow>,
}

impl RawCohortFile {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.patient_id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> RawCohortFile {
        RawCohortFile {
            numeric_names: self.numeric_names.clone(),
            categorical_names: self.categorical_names.clone(),
            embedding_names: self.embedding_names.clone(),
            feature_names: self.feature_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn schema(&self) -> Schema {
        let mut s = Schema::new()
            .with("patient_id", ColumnRole::Id)
            .with("label", ColumnRole::Label);
        for (names, role) in [
            (&self.numeric_names, ColumnRole::Numeric),
            (&self.categorical_names, ColumnRole::Categorical),
            (&self.embedding_names, ColumnRole::Embedding),
            (&self.feature_names, ColumnRole::Feature),
        ] {
            for n in names {
                s = s.with(n.clone(), role);
            }
        }
        s
    }

    /// Writes the cohort in the layout described by [`RawCohortFile::schema`].
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = self.schema().columns.into_iter().map(|(n, _)| n).collect();
        w.write_record(&header).map_err(csv_write_err)?;
        for row in &self.rows {
            let mut rec: Vec<String> = vec![row.patient_id.clone(), row.label.to_string()];
            rec.extend(
                row.numeric
                    .iter()
                    .map(|v| v.map_or_else(String::new, |x| x.to_string())),
            );
            rec.extend(row.categorical.iter().cloned());
            if !self.embedding_names.is_empty() {
                let e = row.embedding.as_ref().ok_or_else(|| {
                    Error::Validation(format!("{} has no embedding row", row.patient_id))
                })?;
                rec.extend(e.iter().map(f64::to_string));
            }
            if !self.feature_names.is_empty() {
                let f = row.feature.as_ref().ok_or_else(|| {
                    Error::Validation(format!("{} has no feature row", row.patient_id))
                })?;
                rec.extend(f.iter().map(f64::to_string));
            }
            w.write_record(&rec).map_err(csv_write_err)?;
        }
        w.flush()
            .map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
        Ok(())
    }

    pub fn save(&self, csv_path: &Path, schema_path: &Path) -> Result<()> {
        let f = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        self.write_csv(BufWriter::new(f))?;
        std::fs::write(schema_path, self.schema().to_text()).map_err(|e| Error::io(schema_path, e))
    }
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv write failed: {e}"))
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim().to_ascii_lowercase();
    MISSING_TOKENS.contains(&c.as_str())
}

fn parse_finite(cell: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("column {column:?}: cannot parse {cell:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("column {column:?}: non-finite value {cell:?}"),
        });
    }
    Ok(v)
}

pub fn load_cohort(path: &Path, schema: &Schema) -> Result<RawCohortFile> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(BufReader::new(f), schema)
}

pub fn read_cohort<R: Read>(input: R, schema: &Schema) -> Result<RawCohortFile> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &String| -> Result<usize> {
        position
            .get(name.as_str())
            .copied()
            .ok_or_else(|| Error::Schema(format!("column {name:?} not present in file header")))
    };
    let resolve = |role| -> Result<(Vec<String>, Vec<usize>)> {
        let names = schema.names(role);
        let idx = names.iter().map(col).collect::<Result<Vec<_>>>()?;
        Ok((names, idx))
    };
    let (_, id_col) = resolve(ColumnRole::Id)?;
    let (_, label_col) = resolve(ColumnRole::Label)?;
    let (numeric_names, numeric_cols) = resolve(ColumnRole::Numeric)?;
    let (categorical_names, categorical_cols) = resolve(ColumnRole::Categorical)?;
    let (embedding_names, embedding_cols) = resolve(ColumnRole::Embedding)?;
    let (feature_names, feature_cols) = resolve(ColumnRole::Feature)?;

    let mut rows = Vec::new();
    let mut seen: HashMap<String, u64> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |i: usize| record.get(i).unwrap_or("");

        let patient_id = cell(id_col[0]).to_string();
        if patient_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty patient id".into(),
            });
        }
        if let Some(first) = seen.insert(patient_id.clone(), line) {
            return Err(Error::Validation(format!(
                "duplicate patient id {patient_id:?} on lines {first} and {line}"
            )));
        }
        let label = match cell(label_col[0]) {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let numeric = numeric_cols
            .iter()
            .zip(&numeric_names)
            .map(|(&i, name)| {
                let c = cell(i);
                if is_missing(c) {
                    Ok(None)
                } else {
                    parse_finite(c, line, name).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let categorical = categorical_cols.iter().map(|&i| cell(i).to_string()).collect();
        let dense = |cols: &[usize], names: &[String]| -> Result<Option<Vec<f64>>> {
            if cols.is_empty() {
                return Ok(None);
            }
            cols.iter()
                .zip(names)
                .map(|(&i, name)| parse_finite(cell(i), line, name))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        let embedding = dense(&embedding_cols, &embedding_names)?;
        let feature = dense(&feature_cols, &feature_names)?;
        rows.push(RawRow {
            patient_id,
            label,
            numeric,
            categorical,
            embedding,
            feature,
        });
    }
    Ok(RawCohortFile {
        numeric_names,
        categorical_names,
        embedding_names,
        feature_names,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub name: String,
    /// First-appearance order.
    pub categories: Vec<String>,
}

/// Per-column statistics used to turn raw biomarkers into fixed-length numeric vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub numeric: Vec<ColumnStats>,
    pub categorical: Vec<Vocabulary>,
    /// When false, numeric cells are only mean-imputed, not centered or scaled.
    pub standardize: bool,
}

impl Scaler {
    /// Fits over the union of the rows of `parts`, which must share column names.
    pub fn fit(parts: &[&RawCohortFile], standardize: bool) -> Result<Scaler> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("no rows to fit a preprocessor on".into()))?;
        for p in parts {
            if p.numeric_names != first.numeric_names
                || p.categorical_names != first.categorical_names
            {
                return Err(Error::Shape(
                    "cohorts disagree on biomarker columns".into(),
                ));
            }
        }
        let n_rows: usize = parts.iter().map(|p| p.len()).sum();
        if n_rows < 2 {
            return Err(Error::Validation(format!(
                "at least 2 rows required to fit a preprocessor, got {n_rows}"
            )));
        }
        let rows = || parts.iter().flat_map(|p| p.rows.iter());

        let mut numeric = Vec::with_capacity(first.numeric_names.len());
        for (j, name) in first.numeric_names.iter().enumerate() {
            let observed: Vec<f64> = rows().filter_map(|r| r.numeric[j]).collect();
            if observed.is_empty() {
                return Err(Error::Validation(format!(
                    "numeric column {name:?} has no observed values"
                )));
            }
            let mean = matrix::mean(&observed);
            let std = matrix::population_std(&observed);
            numeric.push(ColumnStats {
                name: name.clone(),
                mean,
                std: if std < STD_FLOOR { 1.0 } else { std },
            });
        }

        let categorical = first
            .categorical_names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let mut categories: Vec<String> = Vec::new();
                for r in rows() {
                    let c = &r.categorical[j];
                    if !is_missing(c) && !categories.contains(c) {
                        categories.push(c.clone());
                    }
                }
                Vocabulary {
                    name: name.clone(),
                    categories,
                }
            })
            .collect();

        Ok(Scaler {
            numeric,
            categorical,
            standardize,
        })
    }

    pub fn width(&self) -> usize {
        self.numeric.len() + self.categorical.iter().map(|v| v.categories.len()).sum::<usize>()
    }

    pub fn transform_row(&self, row: &RawRow) -> Result<Vec<f64>> {
        if row.numeric.len() != self.numeric.len() || row.categorical.len() != self.categorical.len()
        {
            return Err(Error::Shape(format!(
                "row {} has {}+{} biomarker columns, scaler expects {}+{}",
                row.patient_id,
                row.numeric.len(),
                row.categorical.len(),
                self.numeric.len(),
                self.categorical.len()
            )));
        }
        let mut out = Vec::with_capacity(self.width());
        for (cell, stats) in row.numeric.iter().zip(&self.numeric) {
            let x = cell.unwrap_or(stats.mean);
            out.push(if self.standardize {
                (x - stats.mean) / stats.std
            } else {
                x
            });
        }
        for (cell, vocab) in row.categorical.iter().zip(&self.categorical) {
            out.extend(
                vocab
                    .categories
                    .iter()
                    .map(|c| if c == cell { 1.0 } else { 0.0 }),
            );
        }
        Ok(out)
    }
}

/// Standardizing preprocessor fitted on a single cohort.
pub fn fit_preprocessor(raw: &RawCohortFile) -> Result<Scaler> {
    Scaler::fit(&[raw], true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub biomarkers: Matrix,
    pub embeddings: Option<Matrix>,
    pub features: Option<Matrix>,
    pub scaler: Scaler,
}

impl CohortTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn dense_block(
    raw: &RawCohortFile,
    get: impl Fn(&RawRow) -> Option<&Vec<f64>>,
) -> Result<Option<Matrix>> {
    if raw.rows.is_empty() || raw.rows.iter().any(|r| get(r).is_none()) {
        return Ok(None);
    }
    let rows: Vec<&Vec<f64>> = raw.rows.iter().filter_map(&get).collect();
    Matrix::from_rows(&rows).map(Some)
}

pub fn apply_preprocessor(raw: &RawCohortFile, scaler: &Scaler) -> Result<CohortTable> {
    let rows = raw
        .rows
        .iter()
        .map(|r| scaler.transform_row(r))
        .collect::<Result<Vec<_>>>()?;
    let biomarkers = if rows.is_empty() {
        Matrix::zeros(0, scaler.width())
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(CohortTable {
        ids: raw.ids(),
        labels: raw.labels(),
        biomarkers,
        embeddings: dense_block(raw, |r| r.embedding.as_ref())?,
        features: dense_block(raw, |r| r.feature.as_ref())?,
        scaler: scaler.clone(),
    })
}

pub fn assert_disjoint_ids(a: &[String], b: &[String]) -> Result<()> {
    let b: HashSet<&str> = b.iter().map(String::as_str).collect();
    let shared: Vec<String> = a.iter().filter(|id| b.contains(id.as_str())).cloned().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Overlap(shared))
    }
}

pub fn assert_disjoint(a: &CohortTable, b: &CohortTable) -> Result<()> {
    assert_disjoint_ids(&a.ids, &b.ids)
}

pub fn write_matrix<W: Write>(mut out: W, m: &Matrix) -> std::io::Result<()> {
    let rows = u32::try_from(m.rows()).map_err(std::io::Error::other)?;
    let cols = u32::try_from(m.cols()).map_err(std::io::Error::other)?;
    out.write_all(&rows.to_le_bytes())?;
    out.write_all(&cols.to_le_bytes())?;
    for &v in m.as_slice() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut input: R) -> std::io::Result<Matrix> {
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        input.read_exact(&mut word)?;
        data.push(f32::from_le_bytes(word) as f64);
    }
    Matrix::from_vec(rows, cols, data).map_err(std::io::Error::other)
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_matrix(&mut w, m).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix(BufReader::new(f)).map_err(|e| Error::io(path, e))
}

pub fn save_id_list(path: &Path, ids: &[String]) -> Result<()> {
    let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_id_list(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map(|s| s.trim().to_string()).map_err(|e| Error::io(path, e)))
        .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SidecarTarget {
    /// Teacher embeddings; repeated ids are scans of one patient and get averaged.
    Embedding,
    Feature,
}

/// Attaches sidecar matrix rows to the cohort rows with the matching patient id.
pub fn attach_sidecar(
    raw: &mut RawCohortFile,
    ids: &[String],
    m: &Matrix,
    target: SidecarTarget,
) -> Result<()> {
    if ids.len() != m.rows() {
        return Err(Error::Shape(format!(
            "id list has {} entries but matrix has {} rows",
            ids.len(),
            m.rows()
        )));
    }
    let mut grouped: HashMap<&str, Vec<Vec<f64>>> = HashMap::new();
    for (id, row) in ids.iter().zip(m.iter_rows()) {
        grouped.entry(id.as_str()).or_default().push(row.to_vec());
    }
    let known: HashSet<&str> = raw.rows.iter().map(|r| r.patient_id.as_str()).collect();
    if let Some(stray) = ids.iter().find(|id| !known.contains(id.as_str())) {
        return Err(Error::Validation(format!(
            "sidecar row for unknown patient {stray:?}"
        )));
    }
    for row in &mut raw.rows {
        let scans = grouped.get(row.patient_id.as_str()).ok_or_else(|| {
            Error::Validation(format!("no sidecar row for patient {:?}", row.patient_id))
        })?;
        let value = match target {
            SidecarTarget::Embedding => average_scan_embeddings(scans)?,
            SidecarTarget::Feature => {
                if scans.len() > 1 {
                    return Err(Error::Validation(format!(
                        "patient {:?} has {} feature rows",
                        row.patient_id,
                        scans.len()
                    )));
                }
                scans[0].clone()
            }
        };
        match target {
            SidecarTarget::Embedding => row.embedding = Some(value),
            SidecarTarget::Feature => row.feature = Some(value),
        }
    }
    let names = (0..m.cols()).map(|j| format!("{}_{j:03}", match target {
        SidecarTarget::Embedding => "emb",
        SidecarTarget::Feature => "feat",
    }));
    match target {
        SidecarTarget::Embedding => raw.embedding_names = names.collect(),
        SidecarTarget::Feature => raw.feature_names = names.collect(),
    }
    Ok(())
}
