//! Delimited-text tables and the per-observation exposure index.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{FormulaSpec, StapKind, StapTerm};

pub const BEF_NAME: &str = "bef_name";
pub const BEF_ID: &str = "bef_ID";
pub const DISTANCE: &str = "Distance";
pub const TIME: &str = "Time";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Open { path: String, source: std::io::Error },
    #[error("{source_name}: malformed delimited text: {message}")]
    Parse { source_name: String, message: String },
    #[error("{source_name}: missing required column '{column}'")]
    MissingColumn { source_name: String, column: String },
    #[error("{source_name}: non-numeric value '{value}' in column '{column}' at data row {row}")]
    NotNumeric { source_name: String, column: String, row: usize, value: String },
    #[error("{source_name}: invalid value {value} in column '{column}' at data row {row}: {reason}")]
    InvalidValue { source_name: String, column: String, row: usize, value: f64, reason: &'static str },
    #[error("{source_name}: empty value in column '{column}' at data row {row}")]
    MissingValue { source_name: String, column: String, row: usize },
    #[error("subject table: observation key {0} appears more than once")]
    DuplicateObservation(String),
    #[error("BEF '{bef}' does not appear in the {table} table")]
    MissingBef { bef: String, table: &'static str },
    #[error("model has temporal components but no time table was supplied")]
    MissingTimeTable,
    #[error("model has spatial components but no distance table was supplied")]
    MissingDistanceTable,
    #[error("a time table was supplied but the model has no temporal component")]
    UnexpectedTimeTable,
    #[error(
        "distance and time rows for BEF '{bef}' cannot be aligned one-to-one for observation {observation}"
    )]
    Misaligned { bef: String, observation: String },
    #[error("max distance must be positive, got {0}")]
    BadMaxDistance(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A delimited table with a header row. Values are kept as text; numeric
/// columns are parsed on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    name: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: Vec<String>) -> Self {
        Table { name: name.into(), header, rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn from_reader<R: Read>(
        reader: R,
        delimiter: u8,
        name: impl Into<String>,
    ) -> Result<Table, DataError> {
        let name = name.into();
        let parse_err =
            |e: csv::Error| DataError::Parse { source_name: name.clone(), message: e.to_string() };
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let header: Vec<String> = rdr.headers().map_err(parse_err)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(parse_err)?;
            rows.push(rec.iter().map(String::from).collect());
        }
        Ok(Table { name, header, rows })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_column(&self, column: &str) -> bool {
        self.header.iter().any(|h| h == column)
    }

    pub fn column_index(&self, column: &str) -> Result<usize, DataError> {
        self.header.iter().position(|h| h == column).ok_or_else(|| DataError::MissingColumn {
            source_name: self.name.clone(),
            column: column.to_string(),
        })
    }

    pub fn require(&self, columns: &[&str]) -> Result<(), DataError> {
        columns.iter().try_for_each(|c| self.column_index(c).map(|_| ()))
    }

    /// Text values of a column; empty cells are rejected.
    pub fn text_column(&self, column: &str) -> Result<Vec<&str>, DataError> {
        let j = self.column_index(column)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let v = r[j].as_str();
                if v.is_empty() {
                    Err(DataError::MissingValue {
                        source_name: self.name.clone(),
                        column: column.to_string(),
                        row: i + 1,
                    })
                } else {
                    Ok(v)
                }
            })
            .collect()
    }

    pub fn numeric_column(&self, column: &str) -> Result<Vec<f64>, DataError> {
        let text = self.text_column(column)?;
        text.iter()
            .enumerate()
            .map(|(i, v)| {
                v.parse::<f64>().map_err(|_| DataError::NotNumeric {
                    source_name: self.name.clone(),
                    column: column.to_string(),
                    row: i + 1,
                    value: v.to_string(),
                })
            })
            .collect()
    }

    /// A numeric column whose values must be finite and nonnegative.
    pub fn nonnegative_column(&self, column: &str) -> Result<Vec<f64>, DataError> {
        let values = self.numeric_column(column)?;
        for (i, &v) in values.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DataError::InvalidValue {
                    source_name: self.name.clone(),
                    column: column.to_string(),
                    row: i + 1,
                    value: v,
                    reason: "must be finite and nonnegative",
                });
            }
        }
        Ok(values)
    }

    /// Whether every value of the column parses as a number.
    pub fn is_numeric(&self, column: &str) -> bool {
        self.numeric_column(column).is_ok()
    }

    pub fn write_delimited<W: Write>(&self, writer: W, delimiter: u8) -> Result<(), DataError> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
        let to_io = |e: csv::Error| DataError::Io(std::io::Error::other(e.to_string()));
        w.write_record(&self.header).map_err(to_io)?;
        for r in &self.rows {
            w.write_record(r).map_err(to_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_path(&self, path: &Path, delimiter: u8) -> Result<(), DataError> {
        let file = File::create(path)
            .map_err(|e| DataError::Open { path: path.display().to_string(), source: e })?;
        self.write_delimited(std::io::BufWriter::new(file), delimiter)
    }
}

/// Read a delimited file and check that `required_columns` are present.
pub fn load_table(
    path: &Path,
    required_columns: &[&str],
    delimiter: u8,
) -> Result<Table, DataError> {
    let file = File::open(path)
        .map_err(|e| DataError::Open { path: path.display().to_string(), source: e })?;
    let table = Table::from_reader(file, delimiter, path.display().to_string())?;
    table.require(required_columns)?;
    Ok(table)
}

/// Column names tying the subject table to the BEF tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdColumns {
    pub subject: String,
    #[serde(default)]
    pub groups: Vec<String>,
}

impl IdColumns {
    pub fn new(subject: impl Into<String>) -> Self {
        IdColumns { subject: subject.into(), groups: Vec::new() }
    }

    pub fn with_groups(mut self, groups: &[&str]) -> Self {
        self.groups = groups.iter().map(|g| g.to_string()).collect();
        self
    }

    fn all(&self) -> Vec<&str> {
        std::iter::once(self.subject.as_str()).chain(self.groups.iter().map(String::as_str)).collect()
    }

    fn keys(&self, table: &Table) -> Result<Vec<String>, DataError> {
        let cols = self
            .all()
            .into_iter()
            .map(|c| table.text_column(c))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((0..table.len())
            .map(|i| cols.iter().map(|c| c[i]).collect::<Vec<_>>().join("/"))
            .collect())
    }
}

/// Compressed per-observation lists for one STAP term.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TermIndex {
    offsets: Vec<usize>,
    distances: Vec<f64>,
    times: Vec<f64>,
}

impl TermIndex {
    /// Build from per-observation lists. For spatial-temporal terms both
    /// lists must be aligned; single-component terms leave the other empty.
    pub fn from_lists(distances: Vec<Vec<f64>>, times: Vec<Vec<f64>>) -> Self {
        let n = distances.len().max(times.len());
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut d_flat = Vec::new();
        let mut t_flat = Vec::new();
        for i in 0..n {
            let d = distances.get(i).map(Vec::as_slice).unwrap_or(&[]);
            let t = times.get(i).map(Vec::as_slice).unwrap_or(&[]);
            assert!(d.is_empty() || t.is_empty() || d.len() == t.len(), "misaligned lists");
            d_flat.extend_from_slice(d);
            t_flat.extend_from_slice(t);
            offsets.push(offsets[i] + d.len().max(t.len()));
        }
        TermIndex { offsets, distances: d_flat, times: t_flat }
    }

    pub fn n_obs(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn len_of(&self, obs: usize) -> usize {
        self.offsets[obs + 1] - self.offsets[obs]
    }

    pub fn total_len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Distances of observation `obs`; empty for temporal-only terms.
    pub fn distances(&self, obs: usize) -> &[f64] {
        if self.distances.is_empty() {
            &[]
        } else {
            &self.distances[self.offsets[obs]..self.offsets[obs + 1]]
        }
    }

    /// Times of observation `obs`; empty for spatial-only terms.
    pub fn times(&self, obs: usize) -> &[f64] {
        if self.times.is_empty() {
            &[]
        } else {
            &self.times[self.offsets[obs]..self.offsets[obs + 1]]
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub bef_name: String,
    pub retained: usize,
    pub dropped_beyond_max_distance: usize,
    pub unmatched_rows: usize,
    pub empty_observations: usize,
}

/// Per observation and STAP term, the retained distances and/or times.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureIndex {
    pub n_obs: usize,
    pub terms: Vec<TermIndex>,
    pub report: Vec<TermReport>,
}

impl ExposureIndex {
    /// Observation keys in subject-table order, as used for row matching.
    pub fn observation_keys(subjects: &Table, ids: &IdColumns) -> Result<Vec<String>, DataError> {
        ids.keys(subjects)
    }
}

struct BefRows {
    obs: Vec<usize>,
    bef_ids: Option<Vec<String>>,
    values: Vec<f64>,
    unmatched: usize,
}

fn bef_rows(
    table: &Table,
    value_column: &str,
    bef: &str,
    ids: &IdColumns,
    lookup: &HashMap<String, usize>,
    table_label: &'static str,
) -> Result<BefRows, DataError> {
    let mut required = ids.all();
    required.extend([BEF_NAME, value_column]);
    table.require(&required)?;
    let names = table.text_column(BEF_NAME)?;
    let values = table.nonnegative_column(value_column)?;
    let keys = ids.keys(table)?;
    let bef_id_col = if table.has_column(BEF_ID) { Some(table.text_column(BEF_ID)?) } else { None };
    if !names.contains(&bef) {
        return Err(DataError::MissingBef { bef: bef.to_string(), table: table_label });
    }
    let mut out = BefRows {
        obs: Vec::new(),
        bef_ids: bef_id_col.as_ref().map(|_| Vec::new()),
        values: Vec::new(),
        unmatched: 0,
    };
    for i in 0..table.len() {
        if names[i] != bef {
            continue;
        }
        match lookup.get(&keys[i]) {
            Some(&o) => {
                out.obs.push(o);
                out.values.push(values[i]);
                if let (Some(ids_out), Some(col)) = (out.bef_ids.as_mut(), bef_id_col.as_ref()) {
                    ids_out.push(col[i].to_string());
                }
            }
            None => out.unmatched += 1,
        }
    }
    Ok(out)
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Build the exposure index for every STAP term of `spec`.
///
/// Distances greater than `max_distance` are dropped (the interval is
/// closed). Observations without BEF rows get empty lists. Lists are stored
/// sorted so the index does not depend on input row order.
pub fn build_exposure_index(
    subjects: &Table,
    distances: Option<&Table>,
    times: Option<&Table>,
    spec: &FormulaSpec,
    ids: &IdColumns,
    max_distance: f64,
) -> Result<ExposureIndex, DataError> {
    if !(max_distance > 0.0) {
        return Err(DataError::BadMaxDistance(max_distance));
    }
    if spec.has_temporal() && times.is_none() {
        return Err(DataError::MissingTimeTable);
    }
    if !spec.has_temporal() && times.is_some() {
        return Err(DataError::UnexpectedTimeTable);
    }
    if spec.has_spatial() && distances.is_none() {
        return Err(DataError::MissingDistanceTable);
    }
    let keys = ids.keys(subjects)?;
    let mut lookup = HashMap::with_capacity(keys.len());
    for (i, k) in keys.iter().enumerate() {
        if lookup.insert(k.clone(), i).is_some() {
            return Err(DataError::DuplicateObservation(k.clone()));
        }
    }
    let n = keys.len();
    let mut terms = Vec::with_capacity(spec.stap_terms.len());
    let mut report = Vec::with_capacity(spec.stap_terms.len());
    for term in &spec.stap_terms {
        let (index, rep) = build_term(term, distances, times, ids, &lookup, &keys, n, max_distance)?;
        terms.push(index);
        report.push(rep);
    }
    Ok(ExposureIndex { n_obs: n, terms, report })
}

#[allow(clippy::too_many_arguments)]
fn build_term(
    term: &StapTerm,
    distances: Option<&Table>,
    times: Option<&Table>,
    ids: &IdColumns,
    lookup: &HashMap<String, usize>,
    keys: &[String],
    n: usize,
    max_distance: f64,
) -> Result<(TermIndex, TermReport), DataError> {
    let bef = term.bef_name.as_str();
    let mut rep = TermReport { bef_name: bef.to_string(), ..Default::default() };
    let index = match term.kind {
        StapKind::Spatial => {
            let rows = bef_rows(distances.unwrap(), DISTANCE, bef, ids, lookup, "distance")?;
            rep.unmatched_rows = rows.unmatched;
            let mut lists = vec![Vec::new(); n];
            for (&o, &d) in rows.obs.iter().zip(&rows.values) {
                if d <= max_distance {
                    lists[o].push(d);
                } else {
                    rep.dropped_beyond_max_distance += 1;
                }
            }
            TermIndex::from_lists(lists.into_iter().map(sorted).collect(), Vec::new())
        }
        StapKind::Temporal => {
            let rows = bef_rows(times.unwrap(), TIME, bef, ids, lookup, "time")?;
            rep.unmatched_rows = rows.unmatched;
            let mut lists = vec![Vec::new(); n];
            for (&o, &t) in rows.obs.iter().zip(&rows.values) {
                lists[o].push(t);
            }
            TermIndex::from_lists(Vec::new(), lists.into_iter().map(sorted).collect())
        }
        StapKind::SpatialTemporal => {
            let d_rows = bef_rows(distances.unwrap(), DISTANCE, bef, ids, lookup, "distance")?;
            let t_rows = bef_rows(times.unwrap(), TIME, bef, ids, lookup, "time")?;
            rep.unmatched_rows = d_rows.unmatched + t_rows.unmatched;
            let use_ids = d_rows.bef_ids.is_some() && t_rows.bef_ids.is_some();
            let d_keyed = align_keys(&d_rows, use_ids);
            let t_keyed = align_keys(&t_rows, use_ids);
            let mut pairs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
            let observations: HashSet<usize> =
                d_rows.obs.iter().chain(&t_rows.obs).copied().collect();
            let mut observations: Vec<usize> = observations.into_iter().collect();
            observations.sort_unstable();
            for o in observations {
                let empty = BTreeMap::new();
                let dk = d_keyed.get(&o).unwrap_or(&empty);
                let tk = t_keyed.get(&o).unwrap_or(&empty);
                if dk.len() != tk.len() || dk.keys().any(|k| !tk.contains_key(k)) {
                    return Err(DataError::Misaligned {
                        bef: bef.to_string(),
                        observation: keys[o].clone(),
                    });
                }
                for (k, &d) in dk {
                    if d <= max_distance {
                        pairs[o].push((d, tk[k]));
                    } else {
                        rep.dropped_beyond_max_distance += 1;
                    }
                }
            }
            let mut dl = Vec::with_capacity(n);
            let mut tl = Vec::with_capacity(n);
            for mut p in pairs {
                p.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                dl.push(p.iter().map(|x| x.0).collect());
                tl.push(p.iter().map(|x| x.1).collect());
            }
            TermIndex::from_lists(dl, tl)
        }
    };
    rep.retained = index.total_len();
    rep.empty_observations = (0..n).filter(|&i| index.len_of(i) == 0).count();
    Ok((index, rep))
}

/// Per observation: (bef_ID or "", rank within that ID) -> value.
fn align_keys(rows: &BefRows, use_ids: bool) -> HashMap<usize, BTreeMap<(String, usize), f64>> {
    let mut out: HashMap<usize, BTreeMap<(String, usize), f64>> = HashMap::new();
    let mut rank: HashMap<(usize, String), usize> = HashMap::new();
    for (i, (&o, &v)) in rows.obs.iter().zip(&rows.values).enumerate() {
        let id = match (&rows.bef_ids, use_ids) {
            (Some(ids), true) => ids[i].clone(),
            _ => String::new(),
        };
        let r = rank.entry((o, id.clone())).or_insert(0);
        out.entry(o).or_default().insert((id, *r), v);
        *r += 1;
    }
    out
}
