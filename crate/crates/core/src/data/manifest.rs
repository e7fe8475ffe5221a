use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{MsasssScore, Region, VuRecord};
use crate::error::{Error, Result};

/// Column order used when writing manifests.
pub const MANIFEST_HEADER: [&str; 7] = [
    "vu_id",
    "patient_id",
    "study_id",
    "region",
    "image_ref",
    "upper_label",
    "lower_label",
];

const REQUIRED: [&str; 3] = ["vu_id", "patient_id", "image_ref"];

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<VuRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(file)
}

/// Parses manifest CSV. Rows are returned in file order; errors cite the
/// 1-based line number in the file (the header is line 1).
pub fn read_manifest<R: Read>(reader: R) -> Result<Vec<VuRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);

    for name in REQUIRED {
        if column(name).is_none() {
            return Err(Error::Schema {
                column: name.to_string(),
            });
        }
    }
    let vu_col = column("vu_id").unwrap();
    let patient_col = column("patient_id").unwrap();
    let image_col = column("image_ref").unwrap();
    let study_col = column("study_id");
    let region_col = column("region");
    let upper_col = column("upper_label");
    let lower_col = column("lower_label");

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(idx + 2);
        let cell = |col: Option<usize>| col.and_then(|c| row.get(c)).unwrap_or("");
        let invalid = |message: String| Error::Validation { row: line, message };

        let vu_id = cell(Some(vu_col)).to_string();
        if vu_id.is_empty() {
            return Err(invalid("vu_id is empty".into()));
        }
        let patient_id = cell(Some(patient_col)).to_string();
        if patient_id.is_empty() {
            return Err(invalid(format!("patient_id is empty for {vu_id}")));
        }
        if !seen.insert(vu_id.clone()) {
            return Err(invalid(format!("duplicate vu_id {vu_id}")));
        }
        let region = match cell(region_col) {
            "" => None,
            s => Some(s.parse::<Region>().map_err(|e| invalid(e.to_string()))?),
        };
        let upper_label =
            parse_label(cell(upper_col)).map_err(|m| invalid(format!("upper_label: {m}")))?;
        let lower_label =
            parse_label(cell(lower_col)).map_err(|m| invalid(format!("lower_label: {m}")))?;

        records.push(VuRecord {
            vu_id,
            patient_id,
            study_id: cell(study_col).to_string(),
            region,
            image_ref: cell(Some(image_col)).to_string(),
            upper_label,
            lower_label,
        });
    }
    Ok(records)
}

fn parse_label(cell: &str) -> std::result::Result<Option<MsasssScore>, String> {
    if cell.is_empty() {
        return Ok(None);
    }
    let value: u8 = cell
        .parse()
        .map_err(|_| format!("`{cell}` is not an integer grade"))?;
    MsasssScore::new(value)
        .map(Some)
        .ok_or_else(|| format!("grade {value} is not in 0..=3"))
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[VuRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest_to(file, records)
}

pub fn write_manifest_to<W: Write>(writer: W, records: &[VuRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(MANIFEST_HEADER)?;
    for r in records {
        let label = |s: Option<MsasssScore>| s.map(|s| s.to_string()).unwrap_or_default();
        wtr.write_record([
            r.vu_id.as_str(),
            r.patient_id.as_str(),
            r.study_id.as_str(),
            r.region.map(Region::as_str).unwrap_or(""),
            r.image_ref.as_str(),
            &label(r.upper_label),
            &label(r.lower_label),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<manifest writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Vec<VuRecord>> {
        read_manifest(text.as_bytes())
    }

    #[test]
    fn parses_full_row() {
        let recs = parse(
            "vu_id,patient_id,study_id,region,image_ref,upper_label,lower_label\n\
             v1,p1,S1,cervical,a.png,0,0\n",
        )
        .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].upper_label, MsasssScore::new(0));
        assert_eq!(recs[0].lower_label, MsasssScore::new(0));
        assert_eq!(recs[0].region, Some(Region::Cervical));
    }

    #[test]
    fn empty_cell_is_absent_label() {
        let recs =
            parse("vu_id,patient_id,image_ref,upper_label,lower_label\nv1,p1,a.png,,2\n").unwrap();
        assert_eq!(recs[0].upper_label, None);
        assert_eq!(recs[0].lower_label, MsasssScore::new(2));
    }

    #[test]
    fn label_columns_are_optional() {
        let recs = parse("image_ref,patient_id,vu_id\na.png,p1,v1\nb.png,p1,v2\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].vu_id, "v2");
        assert!(!recs[0].is_labeled());
    }

    #[test]
    fn out_of_range_label_cites_row() {
        let err = parse(
            "vu_id,patient_id,image_ref,upper_label,lower_label\n\
             v1,p1,a.png,0,0\n\
             v2,p1,b.png,0,5\n",
        )
        .unwrap_err();
        match err {
            Error::Validation { row, message } => {
                assert_eq!(row, 3);
                assert!(message.contains("lower_label"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = parse("vu_id,image_ref\nv1,a.png\n").unwrap_err();
        assert!(matches!(err, Error::Schema { ref column } if column == "patient_id"));
    }

    #[test]
    fn duplicate_vu_id_rejected() {
        let err = parse("vu_id,patient_id,image_ref\nv1,p1,a.png\nv1,p2,b.png\n").unwrap_err();
        assert!(matches!(err, Error::Validation { row: 3, .. }));
    }

    #[test]
    fn empty_patient_rejected() {
        let err = parse("vu_id,patient_id,image_ref\nv1,,a.png\n").unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    fn arb_record() -> impl Strategy<Value = VuRecord> {
        (
            "[a-z]{1,6}",
            "[a-zA-Z0-9 ]{0,8}",
            prop::option::of(prop_oneof![Just(Region::Cervical), Just(Region::Lumbar)]),
            "[a-z/]{1,10}\\.png",
            prop::option::of(0u8..4),
            prop::option::of(0u8..4),
        )
            .prop_map(|(patient, study, region, image_ref, up, low)| VuRecord {
                vu_id: String::new(),
                patient_id: patient,
                study_id: study.trim().to_string(),
                region,
                image_ref,
                upper_label: up.and_then(MsasssScore::new),
                lower_label: low.and_then(MsasssScore::new),
            })
    }

    proptest! {
        #[test]
        fn write_then_read_round_trips(mut recs in prop::collection::vec(arb_record(), 0..30)) {
            for (i, r) in recs.iter_mut().enumerate() {
                r.vu_id = format!("vu{i}");
            }
            let mut buf = Vec::new();
            write_manifest_to(&mut buf, &recs).unwrap();
            let back = read_manifest(buf.as_slice()).unwrap();
            prop_assert_eq!(back, recs);
        }
    }
}
