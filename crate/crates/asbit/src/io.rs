//! On-disk formats: I/Q captures, code files, event tables, detection and
//! error reports, and run directories.
//!
//! I/Q captures are interleaved little-endian 32-bit float I,Q pairs with a
//! JSON sidecar. Codes export as text (`+`/`-` per chip) and as packed
//! binary with a JSON descriptor carrying enough to regenerate the chips.
//! Event tables are CSV (`channel,time_s` header) or NDJSON; detections and
//! ground truth are NDJSON, one record per event.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codes::{GoldFamily, LfsrSpec, SpreadingCode};
use crate::netsim::{EventTrain, RunReport};
use crate::phy::IqStream;
use crate::rx::DemodReport;
use crate::{Error, Result};

/// Sidecar metadata stored next to an `iq.bin` capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqSidecar {
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub noise_floor_dbm: Option<f64>,
    pub quant_bits: Option<u8>,
    /// Seed the capture was created from.
    pub seed: u64,
}

/// Write `iq.bin` (interleaved LE f32 I,Q) plus its JSON sidecar.
pub fn write_iq(bin_path: &Path, sidecar_path: &Path, stream: &IqStream, seed: u64) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(bin_path)?);
    for s in &stream.samples {
        w.write_all(&s.re.to_le_bytes())?;
        w.write_all(&s.im.to_le_bytes())?;
    }
    w.flush()?;
    let sidecar = IqSidecar {
        sample_rate_hz: stream.sample_rate_hz,
        duration_s: stream.duration_s(),
        noise_floor_dbm: stream.noise_floor_dbm,
        quant_bits: stream.quant_bits,
        seed,
    };
    write_json(sidecar_path, &sidecar)
}

/// Load a capture from `iq.bin` + sidecar.
pub fn read_iq(bin_path: &Path, sidecar_path: &Path) -> Result<(IqStream, IqSidecar)> {
    let sidecar: IqSidecar = read_json(sidecar_path)?;
    let mut bytes = Vec::new();
    fs::File::open(bin_path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidParam(format!(
            "capture {} is not a whole number of I,Q pairs",
            bin_path.display()
        )));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| {
            num_complex::Complex32::new(
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect();
    Ok((
        IqStream {
            samples,
            sample_rate_hz: sidecar.sample_rate_hz,
            noise_floor_dbm: sidecar.noise_floor_dbm,
            quant_bits: sidecar.quant_bits,
        },
        sidecar,
    ))
}

/// Descriptor stored next to exported codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeDescriptor {
    pub degree: u32,
    pub taps_first: Vec<u32>,
    pub taps_second: Vec<u32>,
    pub seed: u32,
    pub length: usize,
}

impl CodeDescriptor {
    pub fn of(code: &SpreadingCode) -> Self {
        let (taps_first, taps_second) = code.taps();
        Self {
            degree: code.degree(),
            taps_first: taps_first.to_vec(),
            taps_second: taps_second.to_vec(),
            seed: code.seed(),
            length: code.len(),
        }
    }

    /// Regenerate the chips this descriptor describes (the pair is
    /// re-verified on family construction).
    pub fn regenerate(&self) -> Result<SpreadingCode> {
        let family = GoldFamily::new(
            LfsrSpec::new(self.degree, &self.taps_first, 1)?,
            LfsrSpec::new(self.degree, &self.taps_second, 1)?,
        )?;
        family.code(self.seed, self.length)
    }
}

/// Write a code as text, one `+`/`-` per chip.
pub fn write_code_text(path: &Path, code: &SpreadingCode) -> Result<()> {
    let mut line = String::with_capacity(code.len() + 1);
    for &c in code.chips() {
        line.push(if c > 0 { '+' } else { '-' });
    }
    line.push('\n');
    fs::write(path, line)?;
    Ok(())
}

/// Read a `+`/`-` text code back into ±1 chips.
pub fn read_code_text(path: &Path) -> Result<Vec<i8>> {
    let text = fs::read_to_string(path)?;
    let mut chips = Vec::new();
    for (i, ch) in text.trim().chars().enumerate() {
        match ch {
            '+' => chips.push(1),
            '-' => chips.push(-1),
            other => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("unexpected chip character {other:?} at position {i}"),
                })
            }
        }
    }
    Ok(chips)
}

/// Write packed chips (bit 0 = +1, MSB first) plus the JSON descriptor.
pub fn write_code_binary(bin_path: &Path, desc_path: &Path, code: &SpreadingCode) -> Result<()> {
    let mut bytes = vec![0u8; code.len().div_ceil(8)];
    for (i, &c) in code.chips().iter().enumerate() {
        if c < 0 {
            bytes[i / 8] |= 0x80 >> (i % 8);
        }
    }
    fs::write(bin_path, bytes)?;
    write_json(desc_path, &CodeDescriptor::of(code))
}

/// Read a packed code using its descriptor; the unpacked chips are checked
/// against the descriptor's regenerated sequence.
pub fn read_code_binary(bin_path: &Path, desc_path: &Path) -> Result<SpreadingCode> {
    let desc: CodeDescriptor = read_json(desc_path)?;
    let bytes = fs::read(bin_path)?;
    let mut chips = Vec::with_capacity(desc.length);
    for i in 0..desc.length {
        let byte = bytes.get(i / 8).copied().ok_or_else(|| {
            Error::InvalidParam(format!(
                "packed code {} shorter than descriptor length {}",
                bin_path.display(),
                desc.length
            ))
        })?;
        chips.push(if byte & (0x80 >> (i % 8)) != 0 { -1i8 } else { 1i8 });
    }
    let code = desc.regenerate()?;
    if code.chips() != chips.as_slice() {
        return Err(Error::InvalidParam(format!(
            "packed chips in {} do not match their descriptor",
            bin_path.display()
        )));
    }
    Ok(code)
}

/// One event row of an events file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub channel: u64,
    pub time_s: f64,
}

/// Read an events file: CSV with a `channel,time_s` header, or NDJSON
/// records (sniffed from the first non-blank byte). Malformed rows and
/// negative or non-finite timestamps fail with their line number.
pub fn read_events_file(path: &Path) -> Result<Vec<EventRow>> {
    let text = fs::read_to_string(path)?;
    let first = text.trim_start().chars().next();
    let rows = match first {
        Some('{') => read_events_ndjson(&text)?,
        _ => read_events_csv(&text)?,
    };
    for (i, r) in rows.iter().enumerate() {
        if !r.time_s.is_finite() || r.time_s < 0.0 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("timestamp {} out of range", r.time_s),
            });
        }
    }
    Ok(rows)
}

fn read_events_csv(text: &str) -> Result<Vec<EventRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize::<EventRow>().enumerate() {
        // Header occupies line 1.
        let row = record.map_err(|e| Error::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_events_ndjson(text: &str) -> Result<Vec<EventRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: EventRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Write event rows as CSV with the standard header.
pub fn write_events_csv(path: &Path, rows: &[EventRow]) -> Result<()> {
    let mut out = String::from("channel,time_s\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.channel, r.time_s));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One detection record of a detections NDJSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub node_id: u64,
    pub bin_index: u32,
    pub time_s: f64,
    pub score: f32,
    pub filter_index: usize,
}

/// Write detection reports as NDJSON, one record per detection, in node
/// then bin order.
pub fn write_detections_ndjson(path: &Path, reports: &[DemodReport]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for report in reports {
        for det in &report.detections {
            let record = DetectionRecord {
                node_id: report.node_id,
                bin_index: det.bin_index,
                time_s: det.time_s,
                score: det.score,
                filter_index: det.filter_index,
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a detections NDJSON file.
pub fn read_detections_ndjson(path: &Path) -> Result<Vec<DetectionRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Ground-truth NDJSON: one record per event, node then bin order.
pub fn write_truth_ndjson(path: &Path, truth: &[(u64, EventTrain)]) -> Result<()> {
    #[derive(Serialize)]
    struct TruthRecord {
        node_id: u64,
        bin_index: u32,
        time_s: f64,
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (node_id, train) in truth {
        for &bin in train.bins() {
            let record = TruthRecord {
                node_id: *node_id,
                bin_index: bin,
                time_s: bin as f64 * train.bin_size_s,
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Serialize any value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Deserialize a JSON file.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Write a full run directory: `config.json`, `truth.ndjson`,
/// `iq.bin` + `iq.json`, `detections.ndjson`, `errors.json`.
pub fn write_run_dir(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), &report.config)?;
    write_truth_ndjson(&dir.join("truth.ndjson"), &report.truth)?;
    write_iq(
        &dir.join("iq.bin"),
        &dir.join("iq.json"),
        &report.iq,
        report.config.master_seed,
    )?;
    write_detections_ndjson(&dir.join("detections.ndjson"), &report.reports)?;
    write_json(&dir.join("errors.json"), &report.errors)?;
    write_json(&dir.join("stats.json"), &report.stats)?;
    Ok(())
}

/// Write a sweep as `<name>.csv` plus `<name>.meta.json`.
pub fn write_sweep(dir: &Path, name: &str, table: &crate::metrics::SweepTable) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{name}.csv")), table.to_csv())?;
    write_json(&dir.join(format!("{name}.meta.json")), &table.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::default_family;
    use num_complex::Complex32;
    use tempfile::tempdir;

    #[test]
    fn iq_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let stream = IqStream {
            samples: vec![
                Complex32::new(0.1, -0.25),
                Complex32::new(1.5e-4, 3.25),
                Complex32::new(-0.0, 7.0),
            ],
            sample_rate_hz: 30.0e6,
            noise_floor_dbm: Some(-75.75),
            quant_bits: Some(12),
        };
        let bin = dir.path().join("iq.bin");
        let json = dir.path().join("iq.json");
        write_iq(&bin, &json, &stream, 99).unwrap();
        let (loaded, sidecar) = read_iq(&bin, &json).unwrap();
        assert_eq!(loaded.samples, stream.samples);
        assert_eq!(sidecar.seed, 99);
        assert_eq!(sidecar.noise_floor_dbm, Some(-75.75));
        assert_eq!(loaded.sample_rate_hz, 30.0e6);
    }

    #[test]
    fn truncated_iq_rejected() {
        let dir = tempdir().unwrap();
        let bin = dir.path().join("iq.bin");
        let json = dir.path().join("iq.json");
        write_iq(
            &bin,
            &json,
            &IqStream {
                samples: vec![Complex32::new(1.0, 2.0)],
                sample_rate_hz: 1.0,
                noise_floor_dbm: None,
                quant_bits: None,
            },
            0,
        )
        .unwrap();
        let mut bytes = fs::read(&bin).unwrap();
        bytes.pop();
        fs::write(&bin, bytes).unwrap();
        assert!(read_iq(&bin, &json).is_err());
    }

    #[test]
    fn code_text_and_binary_round_trip() {
        let dir = tempdir().unwrap();
        let code = default_family(9).unwrap().code(37, 511).unwrap();

        let txt = dir.path().join("code.txt");
        write_code_text(&txt, &code).unwrap();
        assert_eq!(read_code_text(&txt).unwrap(), code.chips());

        let bin = dir.path().join("code.bin");
        let desc = dir.path().join("code.json");
        write_code_binary(&bin, &desc, &code).unwrap();
        let loaded = read_code_binary(&bin, &desc).unwrap();
        assert_eq!(loaded.chips(), code.chips());
        assert_eq!(loaded.seed(), 37);
    }

    #[test]
    fn corrupted_packed_code_rejected() {
        let dir = tempdir().unwrap();
        let code = default_family(5).unwrap().code(3, 31).unwrap();
        let bin = dir.path().join("code.bin");
        let desc = dir.path().join("code.json");
        write_code_binary(&bin, &desc, &code).unwrap();
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 0x40;
        fs::write(&bin, bytes).unwrap();
        assert!(read_code_binary(&bin, &desc).is_err());
    }

    #[test]
    fn events_csv_round_trip_and_sniffing() {
        let dir = tempdir().unwrap();
        let rows = vec![
            EventRow { channel: 0, time_s: 0.5 },
            EventRow { channel: 3, time_s: 0.0021 },
        ];
        let csv_path = dir.path().join("events.csv");
        write_events_csv(&csv_path, &rows).unwrap();
        assert_eq!(read_events_file(&csv_path).unwrap(), rows);

        let nd_path = dir.path().join("events.ndjson");
        fs::write(
            &nd_path,
            "{\"channel\":0,\"time_s\":0.5}\n{\"channel\":3,\"time_s\":0.0021}\n",
        )
        .unwrap();
        assert_eq!(read_events_file(&nd_path).unwrap(), rows);
    }

    #[test]
    fn malformed_event_row_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "channel,time_s\n0,0.5\nnot-a-number,1.0\n").unwrap();
        match read_events_file(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_timestamp_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("neg.csv");
        fs::write(&path, "channel,time_s\n0,-0.5\n").unwrap();
        assert!(matches!(
            read_events_file(&path),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn empty_events_file_is_empty_list() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        fs::write(&path, "channel,time_s\n").unwrap();
        assert!(read_events_file(&path).unwrap().is_empty());
    }

    #[test]
    fn spike_train_loading_bins_events() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("events.csv");
        fs::write(&path, "channel,time_s\n7,0.5\n").unwrap();
        let trains = crate::netsim::load_spike_trains(&path, 1e-3).unwrap();
        assert_eq!(trains.len(), 1);
        assert_eq!(trains[0].0, 7);
        assert_eq!(trains[0].1.bins(), &[500]);
    }

    #[test]
    fn detections_ndjson_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("detections.ndjson");
        let report = DemodReport {
            node_id: 4,
            detected: EventTrain::new(1e-3, &[2, 9], 0.02).unwrap(),
            detections: vec![
                crate::rx::Detection {
                    bin_index: 2,
                    time_s: 0.00215,
                    score: 0.5,
                    filter_index: 1,
                },
                crate::rx::Detection {
                    bin_index: 9,
                    time_s: 0.00915,
                    score: 0.75,
                    filter_index: 0,
                },
            ],
            threshold: 0.1,
            recovered_f_clk_hz: None,
            recovered_tau_s: None,
        };
        write_detections_ndjson(&path, &[report]).unwrap();
        let records = read_detections_ndjson(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].node_id, 4);
        assert_eq!(records[1].score, 0.75);
    }
}
