//! Raw per-patient event CSVs: `timestamp,event_type,value`.

use super::{BasalRate, Bolus, BolusKind, CarbEntry, CgmReading, ModeChange, PatientStream, PipelineError};
use crate::domain::Mode;
use chrono::{DateTime, SecondsFormat, Utc};
use std::io::{Read, Write};
use std::path::Path;

pub const RAW_CSV_HEADER: [&str; 3] = ["timestamp", "event_type", "value"];

fn fmt_ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn write_stream<W: Write>(writer: W, stream: &PatientStream) -> Result<(), PipelineError> {
    // (timestamp, tie-break rank, type, value)
    let mut rows: Vec<(DateTime<Utc>, u8, &str, String)> = Vec::new();
    rows.extend(stream.cgm.iter().map(|r| (r.timestamp, 0, "cgm", r.bgl.to_string())));
    rows.extend(stream.modes.iter().map(|m| (m.timestamp, 1, "mode", m.mode.to_string())));
    rows.extend(stream.basals.iter().map(|b| (b.timestamp, 2, "basal_rate", b.rate.to_string())));
    rows.extend(stream.carbs.iter().map(|c| (c.timestamp, 3, "carb", c.grams.to_string())));
    rows.extend(stream.boluses.iter().map(|b| {
        let kind = match b.kind {
            BolusKind::Food => "bolus_food",
            BolusKind::Correction => "bolus_correction",
        };
        (b.timestamp, 4, kind, b.units.to_string())
    }));
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RAW_CSV_HEADER)?;
    for (t, _, kind, value) in rows {
        w.write_record([fmt_ts(t).as_str(), kind, value.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stream<R: Read>(patient_id: &str, reader: R) -> Result<PatientStream, PipelineError> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(RAW_CSV_HEADER) {
        return Err(PipelineError::Parse {
            line: 1,
            message: format!("header must be {}", RAW_CSV_HEADER.join(",")),
        });
    }
    let mut stream = PatientStream::new(patient_id);
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let err = |message: String| PipelineError::Parse { line, message };
        let t = DateTime::parse_from_rfc3339(&rec[0])
            .map_err(|e| err(format!("bad timestamp {:?}: {e}", &rec[0])))?
            .with_timezone(&Utc);
        let value = &rec[2];
        let num = || -> Result<f64, PipelineError> {
            value
                .parse::<f64>()
                .map_err(|_| err(format!("bad numeric value {value:?}")))
        };
        match &rec[1] {
            "cgm" => stream.cgm.push(CgmReading { timestamp: t, bgl: num()? }),
            "bolus_food" | "bolus_correction" => stream.boluses.push(Bolus {
                timestamp: t,
                units: num()?,
                kind: if &rec[1] == "bolus_food" {
                    BolusKind::Food
                } else {
                    BolusKind::Correction
                },
            }),
            "basal_rate" => stream.basals.push(BasalRate { timestamp: t, rate: num()? }),
            "carb" => stream.carbs.push(CarbEntry { timestamp: t, grams: num()? }),
            "mode" => stream.modes.push(ModeChange {
                timestamp: t,
                mode: value.parse::<Mode>().map_err(|e| err(e.to_string()))?,
            }),
            other => return Err(err(format!("unknown event_type {other:?}"))),
        }
    }
    stream.validate()?;
    Ok(stream)
}

/// Writes one `<patient_id>.csv` per stream into `dir`.
pub fn write_stream_dir(dir: &Path, streams: &[PatientStream]) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    for s in streams {
        let f = std::fs::File::create(dir.join(format!("{}.csv", s.patient_id)))?;
        write_stream(std::io::BufWriter::new(f), s)?;
    }
    Ok(())
}

/// Reads every `*.csv` in `dir` except `profiles.csv`, in file-name order.
pub fn read_stream_dir(dir: &Path) -> Result<Vec<PatientStream>, PipelineError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "csv")
                && p.file_name().is_some_and(|n| n != "profiles.csv")
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            read_stream(id, std::io::BufReader::new(std::fs::File::open(p)?))
        })
        .collect()
}
