//! Patient-level grouped k-fold assignment.
//!
//! Patients are sorted by id, permuted with a seeded shuffle and dealt
//! round-robin into folds, so every VU of a patient lands in one fold and
//! the result is independent of manifest row order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::VuRecord;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub stratify: bool,
    /// patient_id -> fold index in `0..k`.
    pub mapping: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.mapping.get(patient_id).copied()
    }

    pub fn patients_in(&self, fold: usize) -> Vec<&str> {
        self.mapping
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.mapping.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// CSV with a leading `# k=..,seed=..,stratify=..` line, rows sorted by
    /// patient id.
    pub fn to_csv_string(&self) -> String {
        let mut out = format!(
            "# k={},seed={},stratify={}\npatient_id,fold\n",
            self.k, self.seed, self.stratify
        );
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for (patient, fold) in &self.mapping {
            wtr.write_record([patient.as_str(), &fold.to_string()])
                .expect("writing to memory");
        }
        out.push_str(
            &String::from_utf8(wtr.into_inner().expect("in-memory writer")).expect("utf8"),
        );
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file)
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut first = String::new();
        reader
            .read_line(&mut first)
            .map_err(|e| Error::io("<assignment>", e))?;
        let meta = first
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| Error::Config("assignment file lacks the `# k=..` line".into()))?;
        let (mut k, mut seed, mut stratify) = (None, None, false);
        for part in meta.split(',') {
            let (key, value) = part
                .trim()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed assignment metadata `{part}`")))?;
            let bad = |_| Error::Config(format!("bad value for {key}: `{value}`"));
            match key {
                "k" => k = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                "stratify" => stratify = value.parse::<bool>().map_err(|e| bad(e.to_string()))?,
                _ => {}
            }
        }
        let k = k.ok_or_else(|| Error::Config("assignment metadata missing k".into()))?;
        let seed = seed.ok_or_else(|| Error::Config("assignment metadata missing seed".into()))?;

        let mut rdr = csv::Reader::from_reader(reader);
        let mut mapping = BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map(|p| p.line() as usize + 1).unwrap_or(0);
            let patient = row.get(0).unwrap_or("").to_string();
            let fold: usize = row
                .get(1)
                .and_then(|f| f.parse().ok())
                .filter(|&f| f < k)
                .ok_or_else(|| Error::Validation {
                    row: line,
                    message: format!("fold for {patient} is not an index below {k}"),
                })?;
            if mapping.insert(patient.clone(), fold).is_some() {
                return Err(Error::Validation {
                    row: line,
                    message: format!("patient {patient} assigned twice"),
                });
            }
        }
        Ok(Self {
            k,
            seed,
            stratify,
            mapping,
        })
    }
}

/// Bin used for stratification: the patient's highest present corner
/// grade, with unlabeled patients in their own trailing bin.
fn stratum(records: &[&VuRecord]) -> usize {
    records
        .iter()
        .filter_map(|r| r.max_label())
        .max()
        .map(|s| s.index())
        .unwrap_or(crate::data::NUM_CLASSES)
}

pub fn assign_folds(
    records: &[VuRecord],
    k: usize,
    seed: u64,
    stratify: bool,
) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let mut by_patient: BTreeMap<&str, Vec<&VuRecord>> = BTreeMap::new();
    for r in records {
        by_patient.entry(r.patient_id.as_str()).or_default().push(r);
    }
    if by_patient.len() < k {
        return Err(Error::Config(format!(
            "{} distinct patients cannot fill {k} folds",
            by_patient.len()
        )));
    }

    let mut rng = rng::stream(seed, rng::domain::SPLIT, 0);
    let order: Vec<&str> = if stratify {
        let mut bins: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (patient, recs) in &by_patient {
            bins.entry(stratum(recs)).or_default().push(patient);
        }
        bins.into_values()
            .flat_map(|mut bin| {
                rng::shuffle(&mut bin, &mut rng);
                bin
            })
            .collect()
    } else {
        let mut patients: Vec<&str> = by_patient.keys().copied().collect();
        rng::shuffle(&mut patients, &mut rng);
        patients
    };

    let mapping = order
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p.to_string(), i % k))
        .collect();
    Ok(FoldAssignment {
        k,
        seed,
        stratify,
        mapping,
    })
}

/// Splits `records` into `(train, test)` for one fold, preserving input order.
pub fn materialize_split(
    records: &[VuRecord],
    assignment: &FoldAssignment,
    test_fold: usize,
) -> Result<(Vec<VuRecord>, Vec<VuRecord>)> {
    if test_fold >= assignment.k {
        return Err(Error::Config(format!(
            "test fold {test_fold} out of range for k={}",
            assignment.k
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        let fold = assignment.fold_of(&r.patient_id).ok_or_else(|| {
            Error::Config(format!("patient {} has no fold assignment", r.patient_id))
        })?;
        if fold == test_fold {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}

/// Distinct patients appearing in `records`.
pub fn patients(records: &[VuRecord]) -> BTreeSet<&str> {
    records.iter().map(|r| r.patient_id.as_str()).collect()
}
