use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{VuRecord, NUM_CLASSES};

/// Label histogram of a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_records: usize,
    pub n_patients: usize,
    /// Present labels per grade, both corners pooled.
    pub per_class: [usize; NUM_CLASSES],
    pub upper: [usize; NUM_CLASSES],
    pub lower: [usize; NUM_CLASSES],
    /// Absent corner labels, both corners pooled.
    pub absent: usize,
    pub absent_upper: usize,
    pub absent_lower: usize,
}

impl CorpusStats {
    pub fn labeled_corners(&self) -> usize {
        self.per_class.iter().sum()
    }
}

pub fn corpus_stats(records: &[VuRecord]) -> CorpusStats {
    let mut stats = CorpusStats {
        n_records: records.len(),
        ..Default::default()
    };
    let mut patients = BTreeSet::new();
    for r in records {
        patients.insert(r.patient_id.as_str());
        for (hist, absent, label) in [
            (&mut stats.upper, &mut stats.absent_upper, r.upper_label),
            (&mut stats.lower, &mut stats.absent_lower, r.lower_label),
        ] {
            match label {
                Some(s) => hist[s.index()] += 1,
                None => *absent += 1,
            }
        }
    }
    for c in 0..NUM_CLASSES {
        stats.per_class[c] = stats.upper[c] + stats.lower[c];
    }
    stats.absent = stats.absent_upper + stats.absent_lower;
    stats.n_patients = patients.len();
    stats
}
