//! Effective learning rate recommendation from domain similarity.
//!
//! A query similarity is compared against reference datasets fine-tuned from
//! the same source model; the optimal ELR of the closest reference is
//! returned together with its decade search bucket.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub source_model: String,
    pub extractor: String,
    #[serde(rename = "target")]
    pub target_name: String,
    pub sim: f64,
    pub optimal_elr: f64,
}

impl ReferenceEntry {
    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.sim > 0.0 && self.sim <= 1.0) {
            return Err(format!("similarity {} outside (0, 1]", self.sim));
        }
        if !(1e-4..=10.0).contains(&self.optimal_elr) {
            return Err(format!("optimal elr {} outside [1e-4, 10]", self.optimal_elr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub nearest: ReferenceEntry,
    pub elr: f64,
    pub bucket: Bucket,
    pub sim_gap: f64,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

// Similarity and optimal ELR per target, one column per source model.
// Columns: imagenet/resnet101, imagenet/densenet121, imagenet/mobilenet,
// inat2017/resnet101, places365/resnet101.
const SOURCES: [&str; 5] = [
    "imagenet/resnet101",
    "imagenet/densenet121",
    "imagenet/mobilenet",
    "inat2017/resnet101",
    "places365/resnet101",
];

#[rustfmt::skip]
const TABLE: [(&str, [(f64, f64); 5]); 7] = [
    ("Dogs",      [(0.862, 0.001), (0.851, 0.01), (0.852, 0.01), (0.854, 0.05),  (0.856, 0.5)]),
    ("Caltech",   [(0.892, 0.005), (0.881, 0.01), (0.878, 0.01), (0.871, 0.1),   (0.888, 0.05)]),
    ("Indoor",    [(0.856, 0.01),  (0.850, 0.05), (0.839, 0.01), (0.843, 0.1),   (0.901, 0.05)]),
    ("Birds",     [(0.860, 0.05),  (0.842, 0.05), (0.849, 0.1),  (0.901, 0.005), (0.861, 0.5)]),
    ("Cars",      [(0.845, 0.5),   (0.831, 0.5),  (0.830, 1.0),  (0.847, 1.0),   (0.864, 1.0)]),
    ("Aircrafts", [(0.840, 1.0),   (0.817, 0.1),  (0.831, 1.0),  (0.846, 0.5),   (0.853, 0.5)]),
    ("Flowers",   [(0.844, 0.1),   (0.821, 0.5),  (0.825, 0.1),  (0.879, 0.1),   (0.851, 1.0)]),
];

/// The embedded reference table. Each column's similarities were computed
/// with features from its own source model.
pub fn default_reference_db() -> Vec<ReferenceEntry> {
    let mut db = Vec::with_capacity(SOURCES.len() * TABLE.len());
    for (col, source) in SOURCES.iter().enumerate() {
        for (target, cells) in &TABLE {
            let (sim, optimal_elr) = cells[col];
            db.push(ReferenceEntry {
                source_model: source.to_string(),
                extractor: source.to_string(),
                target_name: target.to_string(),
                sim,
                optimal_elr,
            });
        }
    }
    db
}

/// Loads a reference CSV, or the embedded table when `path` is `None`.
pub fn load_reference_db(path: Option<&Path>) -> Result<Vec<ReferenceEntry>> {
    match path {
        None => Ok(default_reference_db()),
        Some(p) => {
            let file = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
            read_reference_db(file)
        }
    }
}

pub fn read_reference_db<R: Read>(reader: R) -> Result<Vec<ReferenceEntry>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let expected = ["source_model", "extractor", "target", "sim", "optimal_elr"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must be '{}'", expected.join(",")),
        });
    }
    let mut out = Vec::new();
    for (idx, rec) in rdr.deserialize::<ReferenceEntry>().enumerate() {
        let line = idx + 2;
        let entry = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        entry.validate().map_err(|message| Error::Parse { line, message })?;
        out.push(entry);
    }
    Ok(out)
}

/// Decade `[10^k, 10^(k+1)]` containing `elr`. Powers of ten open their own
/// bucket, except 1.0, which closes `[0.1, 1.0]`.
pub fn elr_bucket(elr: f64) -> Result<Bucket> {
    if !(elr.is_finite() && elr > 0.0) {
        return Err(Error::Input(format!("elr must be positive and finite, got {elr}")));
    }
    if elr == 1.0 {
        return Ok(Bucket { lo: 0.1, hi: 1.0 });
    }
    let mut k = elr.log10().floor() as i32;
    // log10 can land one ulp off for exact decimal powers
    if decade(k + 1) <= elr {
        k += 1;
    } else if decade(k) > elr {
        k -= 1;
    }
    Ok(Bucket {
        lo: decade(k),
        hi: decade(k + 1),
    })
}

/// `10^k`, formed by division for negative `k` so that decimal edges such as
/// 0.001 are the nearest doubles.
fn decade(k: i32) -> f64 {
    if k >= 0 {
        10f64.powi(k)
    } else {
        1.0 / 10f64.powi(-k)
    }
}

/// Nearest reference by similarity among `source_model`'s entries; ties go to
/// the lexicographically smaller target name.
pub fn recommend_elr(db: &[ReferenceEntry], source_model: &str, sim_score: f64) -> Result<Recommendation> {
    recommend_elr_with_extractor(db, source_model, sim_score, None)
}

/// As [`recommend_elr`]; a query extractor that differs from the matched
/// entry's extractor yields a warning rather than an error.
pub fn recommend_elr_with_extractor(
    db: &[ReferenceEntry],
    source_model: &str,
    sim_score: f64,
    query_extractor: Option<&str>,
) -> Result<Recommendation> {
    if db.is_empty() {
        return Err(Error::EmptyInput("reference database has no entries".into()));
    }
    if !sim_score.is_finite() {
        return Err(Error::Input(format!("similarity must be finite, got {sim_score}")));
    }
    let nearest = db
        .iter()
        .filter(|e| e.source_model == source_model)
        .min_by(|a, b| {
            let ga = (a.sim - sim_score).abs();
            let gb = (b.sim - sim_score).abs();
            ga.total_cmp(&gb).then_with(|| a.target_name.cmp(&b.target_name))
        })
        .ok_or_else(|| Error::Lookup(format!("no reference entries for source model '{source_model}'")))?;

    let warning = query_extractor.filter(|q| *q != nearest.extractor).map(|q| {
        format!(
            "query features come from '{q}' but references use '{}'; similarity scales may differ",
            nearest.extractor
        )
    });
    Ok(Recommendation {
        elr: nearest.optimal_elr,
        bucket: elr_bucket(nearest.optimal_elr)?,
        sim_gap: (nearest.sim - sim_score).abs(),
        nearest: nearest.clone(),
        method: "nearest-neighbor".into(),
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imagenet(db: &[ReferenceEntry]) -> Vec<&ReferenceEntry> {
        db.iter().filter(|e| e.source_model == "imagenet/resnet101").collect()
    }

    #[test]
    fn default_db_columns() {
        let db = default_reference_db();
        assert_eq!(imagenet(&db).len(), 7);
        let birds = db
            .iter()
            .find(|e| e.source_model == "inat2017/resnet101" && e.target_name == "Birds")
            .unwrap();
        assert_eq!((birds.sim, birds.optimal_elr), (0.901, 0.005));
        for e in &db {
            e.validate().unwrap();
        }
    }

    #[test]
    fn nearest_examples() {
        let db = default_reference_db();
        let r = recommend_elr(&db, "imagenet/resnet101", 0.862).unwrap();
        assert_eq!(r.nearest.target_name, "Dogs");
        assert_eq!(r.elr, 0.001);
        assert_eq!(r.bucket, Bucket { lo: 0.001, hi: 0.01 });

        let r = recommend_elr(&db, "imagenet/resnet101", 0.840).unwrap();
        assert_eq!(r.nearest.target_name, "Aircrafts");
        assert_eq!(r.elr, 1.0);
        assert_eq!(r.bucket, Bucket { lo: 0.1, hi: 1.0 });
    }

    #[test]
    fn between_anchors_picks_closest() {
        // Gaps from 0.850: Cars 0.005, Flowers 0.006, Indoor 0.006, Aircrafts 0.010.
        let db = default_reference_db();
        let r = recommend_elr(&db, "imagenet/resnet101", 0.850).unwrap();
        assert_eq!(r.nearest.target_name, "Cars");
        assert_eq!(r.elr, 0.5);
        assert_eq!(r.bucket, Bucket { lo: 0.1, hi: 1.0 });
    }

    #[test]
    fn ties_prefer_smaller_name() {
        let mk = |name: &str, sim: f64, elr: f64| ReferenceEntry {
            source_model: "m".into(),
            extractor: "m".into(),
            target_name: name.into(),
            sim,
            optimal_elr: elr,
        };
        let db = vec![mk("zeta", 0.25, 0.1), mk("alpha", 0.75, 0.01)];
        let r = recommend_elr(&db, "m", 0.5).unwrap();
        assert_eq!(r.nearest.target_name, "alpha");
    }

    #[test]
    fn self_queries_return_self() {
        let db = default_reference_db();
        for e in &db {
            let r = recommend_elr(&db, &e.source_model, e.sim).unwrap();
            assert_eq!(r.elr, e.optimal_elr, "{} / {}", e.source_model, e.target_name);
        }
    }

    #[test]
    fn missing_source_is_lookup_error() {
        let db = default_reference_db();
        assert!(matches!(
            recommend_elr(&db, "jft/resnet101", 0.6),
            Err(Error::Lookup(_))
        ));
        assert!(matches!(
            recommend_elr(&[], "imagenet/resnet101", 0.6),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn extractor_mismatch_warns() {
        let db = default_reference_db();
        let r = recommend_elr_with_extractor(&db, "imagenet/resnet101", 0.85, Some("raw-input")).unwrap();
        assert!(r.warning.is_some());
        let r = recommend_elr_with_extractor(&db, "imagenet/resnet101", 0.85, Some("imagenet/resnet101")).unwrap();
        assert!(r.warning.is_none());
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(elr_bucket(0.05).unwrap(), Bucket { lo: 0.01, hi: 0.1 });
        assert_eq!(elr_bucket(1.0).unwrap(), Bucket { lo: 0.1, hi: 1.0 });
        assert_eq!(elr_bucket(0.001).unwrap(), Bucket { lo: 0.001, hi: 0.01 });
        assert_eq!(elr_bucket(0.01).unwrap(), Bucket { lo: 0.01, hi: 0.1 });
        assert_eq!(elr_bucket(0.1).unwrap(), Bucket { lo: 0.1, hi: 1.0 });
        assert_eq!(elr_bucket(5.0).unwrap(), Bucket { lo: 1.0, hi: 10.0 });
        assert_eq!(elr_bucket(10.0).unwrap(), Bucket { lo: 10.0, hi: 100.0 });
        assert!(matches!(elr_bucket(0.0), Err(Error::Input(_))));
        assert!(matches!(elr_bucket(-0.1), Err(Error::Input(_))));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let text = "source_model,extractor,target,sim,optimal_elr\nm,m,A,0.9,0.01\nm,m,B,0.8,0.5\n";
        let db = read_reference_db(text.as_bytes()).unwrap();
        assert_eq!(db.len(), 2);
        assert_eq!(db[1].target_name, "B");

        let bad = "source_model,extractor,target,sim,optimal_elr\nm,m,A,0.9,0.01\nm,m,B,oops,0.5\n";
        match read_reference_db(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let out_of_range = "source_model,extractor,target,sim,optimal_elr\nm,m,A,1.5,0.01\n";
        assert!(matches!(
            read_reference_db(out_of_range.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));

        let empty = read_reference_db("".as_bytes()).unwrap();
        assert!(empty.is_empty());
        assert!(matches!(recommend_elr(&empty, "m", 0.9), Err(Error::EmptyInput(_))));
    }
}
