//! Per-image feature ingestion and reduction to per-class centroid profiles.
//!
//! A [`DomainProfile`] is one side of the transportation problem: a weighted
//! set of class centroids, where each weight is the fraction of images that
//! carry the label.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of profile weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub label: String,
    pub vector: Vec<f64>,
}

/// Per-image feature vectors with a uniform dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    rows: Vec<FeatureRow>,
    dim: usize,
}

impl RawFeatures {
    pub fn new(rows: Vec<FeatureRow>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::EmptyInput("feature table has no rows".into()))?;
        let dim = first.vector.len();
        if dim == 0 {
            return Err(Error::Data("feature vectors must have at least one component".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.vector.len() != dim {
                return Err(Error::dim(format!("feature row {i}"), dim, row.vector.len()));
            }
            if let Some(j) = row.vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite value in row {i}, component {j}")));
            }
        }
        Ok(Self { rows, dim })
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Distinct labels in lexicographic order.
    pub fn labels(&self) -> Vec<&str> {
        let mut labels: Vec<&str> = self.rows.iter().map(|r| r.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

/// Weighted class centroids of one domain, sorted by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProfile {
    pub name: String,
    pub extractor_id: String,
    labels: Vec<String>,
    centroids: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DomainProfile {
    /// Builds a profile from unnormalized positive class masses. Classes are
    /// reordered by label and the masses renormalized to sum to one.
    pub fn from_masses(
        name: impl Into<String>,
        extractor_id: impl Into<String>,
        labels: Vec<String>,
        centroids: Vec<Vec<f64>>,
        masses: Vec<f64>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("profile has no classes".into()));
        }
        if centroids.len() != labels.len() {
            return Err(Error::dim("profile centroids", labels.len(), centroids.len()));
        }
        if masses.len() != labels.len() {
            return Err(Error::dim("profile weights", labels.len(), masses.len()));
        }
        let dim = centroids[0].len();
        if dim == 0 {
            return Err(Error::Data("centroids must have at least one component".into()));
        }
        for (k, c) in centroids.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::dim(format!("centroid {k}"), dim, c.len()));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite component in centroid {k}")));
            }
        }
        if let Some(k) = masses.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Data(format!(
                "class weight {} for '{}' must be positive and finite",
                masses[k], labels[k]
            )));
        }

        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by(|&a, &b| labels[a].cmp(&labels[b]));
        if order.windows(2).any(|w| labels[w[0]] == labels[w[1]]) {
            return Err(Error::Data("duplicate class label in profile".into()));
        }
        let total: f64 = masses.iter().sum();
        Ok(Self {
            name: name.into(),
            extractor_id: extractor_id.into(),
            labels: order.iter().map(|&k| labels[k].clone()).collect(),
            centroids: order.iter().map(|&k| centroids[k].clone()).collect(),
            weights: order.iter().map(|&k| masses[k] / total).collect(),
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    /// Multiplies every centroid by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.centroids {
            c.iter_mut().for_each(|v| *v *= factor);
        }
        out
    }
}

/// Averages the vectors of each label; weights are label frequencies.
pub fn build_domain_profile(
    raw: &RawFeatures,
    name: impl Into<String>,
    extractor_id: impl Into<String>,
) -> Result<DomainProfile> {
    let mut acc: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for row in raw.rows() {
        let entry = acc
            .entry(row.label.as_str())
            .or_insert_with(|| (vec![0.0; raw.dim()], 0));
        for (s, v) in entry.0.iter_mut().zip(&row.vector) {
            *s += v;
        }
        entry.1 += 1;
    }
    let mut labels = Vec::with_capacity(acc.len());
    let mut centroids = Vec::with_capacity(acc.len());
    let mut masses = Vec::with_capacity(acc.len());
    for (label, (sum, count)) in acc {
        labels.push(label.to_string());
        centroids.push(sum.into_iter().map(|s| s / count as f64).collect());
        masses.push(count as f64);
    }
    DomainProfile::from_masses(name, extractor_id, labels, centroids, masses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureFormat {
    /// `label,f0,...` with one row per image.
    Csv,
    /// `label,count,f0,...` with one row per class.
    CentroidCsv,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureTable {
    Raw(RawFeatures),
    Profile(DomainProfile),
}

impl FeatureTable {
    /// Reduces the table to a profile. Raw tables are averaged per label;
    /// profiles pass through with their name replaced.
    pub fn into_profile(self, name: &str, extractor_id: &str) -> Result<DomainProfile> {
        match self {
            FeatureTable::Raw(raw) => build_domain_profile(&raw, name, extractor_id),
            FeatureTable::Profile(mut p) => {
                p.name = name.to_string();
                p.extractor_id = extractor_id.to_string();
                Ok(p)
            }
        }
    }
}

pub fn load_feature_table(path: &Path, format: FeatureFormat) -> Result<FeatureTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_feature_table(file, format, &name)
}

pub fn read_feature_table<R: Read>(reader: R, format: FeatureFormat, name: &str) -> Result<FeatureTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        None => return Err(Error::EmptyInput(format!("feature table '{name}' is empty"))),
        Some(r) => r.map_err(|e| csv_error(e, 1))?,
    };
    let leading = match format {
        FeatureFormat::Csv => 1,
        FeatureFormat::CentroidCsv => 2,
    };
    if header.get(0) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with 'label'".into(),
        });
    }
    if format == FeatureFormat::CentroidCsv && header.get(1) != Some("count") {
        return Err(Error::Parse {
            line: 1,
            message: "centroid-csv header must be 'label,count,f0,...'".into(),
        });
    }
    if header.len() <= leading {
        return Err(Error::Parse {
            line: 1,
            message: "header declares no feature columns".into(),
        });
    }
    let width = header.len();

    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for (idx, record) in records.enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| csv_error(e, line))?;
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != width {
            return Err(Error::dim(
                format!("row width at line {line}"),
                width - leading,
                record.len().saturating_sub(leading),
            ));
        }
        let label = record[0].to_string();
        if format == FeatureFormat::CentroidCsv {
            counts.push(parse_number(&record[1], line)?);
        }
        let vector = record
            .iter()
            .skip(leading)
            .map(|field| parse_number(field, line))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(FeatureRow { label, vector });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("feature table '{name}' has no data rows")));
    }

    match format {
        FeatureFormat::Csv => Ok(FeatureTable::Raw(RawFeatures::new(rows)?)),
        FeatureFormat::CentroidCsv => {
            let (labels, centroids) = rows.into_iter().map(|r| (r.label, r.vector)).unzip();
            Ok(FeatureTable::Profile(DomainProfile::from_masses(
                name, "unknown", labels, centroids, counts,
            )?))
        }
    }
}

fn parse_number(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("'{field}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Data(format!("non-finite value '{field}' at line {line}")));
    }
    Ok(v)
}

fn csv_error(e: csv::Error, line: usize) -> Error {
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Writes a profile as centroid-csv with weights scaled to `count_scale`.
pub fn write_centroid_csv<W: std::io::Write>(profile: &DomainProfile, count_scale: f64, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string(), "count".to_string()];
    header.extend((0..profile.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_error(e, 1))?;
    for ((label, c), weight) in profile.labels().iter().zip(profile.centroids()).zip(profile.weights()) {
        let mut rec = vec![label.clone(), (weight * count_scale).to_string()];
        rec.extend(c.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(e, 0))?;
    }
    w.flush().map_err(|e| Error::io("<centroid-csv>", e))?;
    Ok(())
}
