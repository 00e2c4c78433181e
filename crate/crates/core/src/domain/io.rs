use super::{DomainError, FactualSample, PatientProfile};
use std::io::{Read, Write};

pub const SAMPLE_CSV_HEADER: &str = "patient_id,meal_timestamp,age,sex,ethnicity,a1c,carb_size,total_bolus,delta_t,mode,total_basal,premeal_slope,premeal_bgl,outcome";

pub fn write_samples<W: Write>(writer: W, samples: &[FactualSample]) -> Result<(), DomainError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s)?;
    }
    if samples.is_empty() {
        w.write_record(SAMPLE_CSV_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples<R: Read>(reader: R) -> Result<Vec<FactualSample>, DomainError> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != SAMPLE_CSV_HEADER {
        return Err(DomainError::SchemaMismatch(format!(
            "unexpected sample header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let s: FactualSample = rec?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_profiles<W: Write>(writer: W, profiles: &[PatientProfile]) -> Result<(), DomainError> {
    let mut w = csv::Writer::from_writer(writer);
    for p in profiles {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_profiles<R: Read>(reader: R) -> Result<Vec<PatientProfile>, DomainError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let p: PatientProfile = rec?;
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{row_one, row_two};
    use super::*;

    #[test]
    fn header_is_exact_and_rows_round_trip() {
        let rows = vec![row_one(), row_two()];
        let mut buf = Vec::new();
        write_samples(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), SAMPLE_CSV_HEADER);
        assert!(text.contains("p01,2024-01-10T12:00:00Z,61,F,White,6.7,20.0,7.57,-5.0,regular"));
        assert!(text.lines().nth(2).unwrap().ends_with(",hyperglycemia"));
        assert_eq!(read_samples(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn rejects_foreign_header() {
        let csv = "patient,meal_timestamp\nx,y\n";
        assert!(read_samples(csv.as_bytes()).is_err());
    }

    #[test]
    fn rejects_out_of_range_rows() {
        let mut bad = row_one();
        bad.premeal_bgl = 10.0;
        let mut buf = Vec::new();
        write_samples(&mut buf, &[bad]).unwrap();
        assert!(matches!(
            read_samples(buf.as_slice()),
            Err(DomainError::InvalidSample(_))
        ));
    }
}
