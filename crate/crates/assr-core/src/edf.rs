//! EDF (European Data Format) reading and writing.
//!
//! An EDF file is a 256-byte ASCII header, one 256-byte ASCII header extension
//! per signal, then data records of interleaved 16-bit little-endian
//! two's-complement samples. Digital values map to physical units through the
//! per-signal affine calibration given by the (physical, digital) min/max
//! pairs. The parser is strict about the version tag and byte-length
//! arithmetic; trailing bytes beyond the promised records are tolerated.

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};

use crate::error::{Error, Result};

/// Fixed main-header size and per-signal header extension size, in bytes.
const HEADER_BYTES: usize = 256;

/// Per-signal metadata from the header extension.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub label: String,
    pub transducer: String,
    pub physical_unit: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
}

impl SignalSpec {
    /// Sampling rate implied by the record layout.
    pub fn sample_rate(&self, record_duration_s: f64) -> f64 {
        self.samples_per_record as f64 / record_duration_s
    }

    /// Digital-to-physical calibration. Written as a lerp so the digital
    /// extremes map exactly onto the physical extremes.
    pub fn to_physical(&self, digital: i16) -> f64 {
        let t = (digital as f64 - self.digital_min as f64)
            / (self.digital_max as f64 - self.digital_min as f64);
        self.physical_min * (1.0 - t) + self.physical_max * t
    }

    /// Inverse calibration with rounding, clamped to the digital range.
    pub fn to_digital(&self, physical: f64) -> i16 {
        let t = (physical - self.physical_min) / (self.physical_max - self.physical_min);
        let d = self.digital_min as f64 + t * (self.digital_max as f64 - self.digital_min as f64);
        d.round()
            .clamp(self.digital_min as f64, self.digital_max as f64) as i16
    }
}

/// Parsed EDF header.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient_id: String,
    pub recording_id: String,
    pub start: NaiveDateTime,
    pub num_records: usize,
    pub record_duration_s: f64,
    pub signals: Vec<SignalSpec>,
}

/// Header plus raw digital samples, one contiguous vector per signal.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEdf {
    pub header: EdfHeader,
    pub digital: Vec<Vec<i16>>,
}

/// One channel in physical units, ready for preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub patient_id: String,
    pub channel_label: String,
    pub fs: f64,
    /// Samples in the signal's physical unit (µV for EEG).
    pub samples: Vec<f64>,
}

fn ascii_field(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).trim().to_string()
}

fn parse_num<T: std::str::FromStr>(bytes: &[u8], field: &'static str) -> Result<T> {
    let s = ascii_field(bytes);
    s.parse().map_err(|_| Error::MalformedField {
        field,
        value: s.clone(),
    })
}

/// EDF stores two-digit years; 85–99 mean 1985–1999 and 00–84 mean 2000–2084.
fn parse_start(date: &str, time: &str) -> Result<NaiveDateTime> {
    let malformed = |value: &str| Error::MalformedField {
        field: "start_datetime",
        value: value.to_string(),
    };
    let d: Vec<&str> = date.split('.').collect();
    let t: Vec<&str> = time.split('.').collect();
    if d.len() != 3 || t.len() != 3 {
        return Err(malformed(&format!("{date} {time}")));
    }
    let nums = |parts: &[&str]| -> Result<Vec<u32>> {
        parts
            .iter()
            .map(|p| p.trim().parse().map_err(|_| malformed(&format!("{date} {time}"))))
            .collect()
    };
    let d = nums(&d)?;
    let t = nums(&t)?;
    let year = if d[2] >= 85 { 1900 + d[2] } else { 2000 + d[2] };
    NaiveDate::from_ymd_opt(year as i32, d[1], d[0])
        .and_then(|day| day.and_hms_opt(t[0], t[1], t[2]))
        .ok_or_else(|| malformed(&format!("{date} {time}")))
}

/// Parses a complete EDF file into header and per-signal digital samples.
pub fn parse_edf_raw(bytes: &[u8]) -> Result<RawEdf> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Truncated {
            expected: HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let version_bytes = &bytes[0..8];
    let version = ascii_field(version_bytes);
    if version_bytes != b"0       " {
        return Err(Error::VersionMismatch {
            found: String::from_utf8_lossy(version_bytes).into_owned(),
        });
    }
    let patient_id = ascii_field(&bytes[8..88]);
    let recording_id = ascii_field(&bytes[88..168]);
    let start = parse_start(&ascii_field(&bytes[168..176]), &ascii_field(&bytes[176..184]))?;
    let header_len: usize = parse_num(&bytes[184..192], "header_bytes")?;
    let num_records_raw: i64 = parse_num(&bytes[236..244], "num_records")?;
    if num_records_raw < 0 {
        return Err(Error::MalformedField {
            field: "num_records",
            value: num_records_raw.to_string(),
        });
    }
    let num_records = num_records_raw as usize;
    let record_duration_s: f64 = parse_num(&bytes[244..252], "record_duration")?;
    if !(record_duration_s > 0.0) {
        return Err(Error::MalformedField {
            field: "record_duration",
            value: record_duration_s.to_string(),
        });
    }
    let ns: usize = parse_num(&bytes[252..256], "num_signals")?;
    if ns == 0 {
        return Err(Error::MalformedField {
            field: "num_signals",
            value: "0".into(),
        });
    }
    let expected_header = HEADER_BYTES + ns * HEADER_BYTES;
    if header_len != expected_header {
        return Err(Error::MalformedField {
            field: "header_bytes",
            value: header_len.to_string(),
        });
    }
    if bytes.len() < expected_header {
        return Err(Error::Truncated {
            expected: expected_header,
            actual: bytes.len(),
        });
    }

    // The signal headers store each field for all signals together.
    let ext = &bytes[HEADER_BYTES..expected_header];
    let field = |offset: usize, width: usize, i: usize| &ext[offset * ns + i * width..offset * ns + (i + 1) * width];
    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        // Field offsets within the extension, in bytes per signal: label 16,
        // transducer 80, unit 8, phys min/max 8+8, dig min/max 8+8, prefilter
        // 80, samples per record 8, reserved 32.
        let label = ascii_field(field(0, 16, i));
        let transducer = ascii_field(&ext[16 * ns + i * 80..16 * ns + (i + 1) * 80]);
        let base = 96 * ns;
        let unit = ascii_field(&ext[base + i * 8..base + (i + 1) * 8]);
        let physical_min: f64 = parse_num(&ext[104 * ns + i * 8..104 * ns + (i + 1) * 8], "physical_min")?;
        let physical_max: f64 = parse_num(&ext[112 * ns + i * 8..112 * ns + (i + 1) * 8], "physical_max")?;
        let digital_min: i32 = parse_num(&ext[120 * ns + i * 8..120 * ns + (i + 1) * 8], "digital_min")?;
        let digital_max: i32 = parse_num(&ext[128 * ns + i * 8..128 * ns + (i + 1) * 8], "digital_max")?;
        let prefiltering = ascii_field(&ext[136 * ns + i * 80..136 * ns + (i + 1) * 80]);
        let samples_per_record: usize =
            parse_num(&ext[216 * ns + i * 8..216 * ns + (i + 1) * 8], "samples_per_record")?;
        if digital_max <= digital_min {
            return Err(Error::MalformedField {
                field: "digital_range",
                value: format!("[{digital_min}, {digital_max}]"),
            });
        }
        if !(i16::MIN as i32..=i16::MAX as i32).contains(&digital_min)
            || !(i16::MIN as i32..=i16::MAX as i32).contains(&digital_max)
        {
            return Err(Error::MalformedField {
                field: "digital_range",
                value: format!("[{digital_min}, {digital_max}]"),
            });
        }
        if physical_max == physical_min {
            return Err(Error::MalformedField {
                field: "physical_range",
                value: format!("[{physical_min}, {physical_max}]"),
            });
        }
        if samples_per_record == 0 {
            return Err(Error::MalformedField {
                field: "samples_per_record",
                value: "0".into(),
            });
        }
        signals.push(SignalSpec {
            label,
            transducer,
            physical_unit: unit,
            physical_min,
            physical_max,
            digital_min,
            digital_max,
            prefiltering,
            samples_per_record,
        });
    }

    let record_samples: usize = signals.iter().map(|s| s.samples_per_record).sum();
    let expected_total = expected_header + num_records * record_samples * 2;
    if bytes.len() < expected_total {
        return Err(Error::Truncated {
            expected: expected_total,
            actual: bytes.len(),
        });
    }

    let mut digital: Vec<Vec<i16>> = signals
        .iter()
        .map(|s| Vec::with_capacity(s.samples_per_record * num_records))
        .collect();
    let mut pos = expected_header;
    for _ in 0..num_records {
        for (sig, out) in signals.iter().zip(digital.iter_mut()) {
            let n = sig.samples_per_record;
            for chunk in bytes[pos..pos + 2 * n].chunks_exact(2) {
                out.push(i16::from_le_bytes([chunk[0], chunk[1]]));
            }
            pos += 2 * n;
        }
    }

    Ok(RawEdf {
        header: EdfHeader {
            version,
            patient_id,
            recording_id,
            start,
            num_records,
            record_duration_s,
            signals,
        },
        digital,
    })
}

/// Parses an EDF file and calibrates every signal into physical units.
pub fn parse_edf(bytes: &[u8]) -> Result<(EdfHeader, Vec<Recording>)> {
    let raw = parse_edf_raw(bytes)?;
    let recordings = raw
        .header
        .signals
        .iter()
        .zip(raw.digital.iter())
        .map(|(sig, dig)| Recording {
            patient_id: raw.header.patient_id.clone(),
            channel_label: sig.label.clone(),
            fs: sig.sample_rate(raw.header.record_duration_s),
            samples: dig.iter().map(|&d| sig.to_physical(d)).collect(),
        })
        .collect();
    Ok((raw.header, recordings))
}

fn format_f64_field(v: f64, field: &'static str, width: usize) -> Result<String> {
    let s = if v == v.trunc() && v.abs() < 1e8 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    };
    if s.len() > width {
        return Err(Error::FieldTooLong {
            field,
            value: s,
            width,
        });
    }
    Ok(s)
}

fn push_field(buf: &mut Vec<u8>, value: &str, width: usize, field: &'static str) -> Result<()> {
    if value.len() > width || !value.is_ascii() {
        return Err(Error::FieldTooLong {
            field,
            value: value.to_string(),
            width,
        });
    }
    buf.extend_from_slice(value.as_bytes());
    buf.extend(std::iter::repeat(b' ').take(width - value.len()));
    Ok(())
}

/// Serializes a header and per-signal digital samples into EDF bytes.
///
/// Each `digital[i]` must hold exactly `num_records * samples_per_record[i]`
/// samples; writing then parsing reproduces the header fields and digital
/// values exactly.
pub fn write_edf(header: &EdfHeader, digital: &[Vec<i16>]) -> Result<Vec<u8>> {
    let ns = header.signals.len();
    if ns == 0 || digital.len() != ns {
        return Err(Error::WrongCount {
            expected: ns,
            actual: digital.len(),
        });
    }
    for (sig, data) in header.signals.iter().zip(digital) {
        let expected = sig.samples_per_record * header.num_records;
        if data.len() != expected {
            return Err(Error::WrongCount {
                expected,
                actual: data.len(),
            });
        }
    }
    let year = header.start.year();
    if !(1985..=2084).contains(&year) {
        return Err(Error::MalformedField {
            field: "start_datetime",
            value: year.to_string(),
        });
    }

    let mut buf = Vec::with_capacity(HEADER_BYTES * (ns + 1));
    push_field(&mut buf, "0", 8, "version")?;
    push_field(&mut buf, &header.patient_id, 80, "patient_id")?;
    push_field(&mut buf, &header.recording_id, 80, "recording_id")?;
    let date = format!(
        "{:02}.{:02}.{:02}",
        header.start.day(),
        header.start.month(),
        year % 100
    );
    let time = format!(
        "{:02}.{:02}.{:02}",
        header.start.hour(),
        header.start.minute(),
        header.start.second()
    );
    push_field(&mut buf, &date, 8, "start_date")?;
    push_field(&mut buf, &time, 8, "start_time")?;
    push_field(&mut buf, &format!("{}", HEADER_BYTES * (ns + 1)), 8, "header_bytes")?;
    push_field(&mut buf, "", 44, "reserved")?;
    push_field(&mut buf, &header.num_records.to_string(), 8, "num_records")?;
    push_field(
        &mut buf,
        &format_f64_field(header.record_duration_s, "record_duration", 8)?,
        8,
        "record_duration",
    )?;
    push_field(&mut buf, &ns.to_string(), 4, "num_signals")?;

    for sig in &header.signals {
        push_field(&mut buf, &sig.label, 16, "label")?;
    }
    for sig in &header.signals {
        push_field(&mut buf, &sig.transducer, 80, "transducer")?;
    }
    for sig in &header.signals {
        push_field(&mut buf, &sig.physical_unit, 8, "physical_unit")?;
    }
    for sig in &header.signals {
        let s = format_f64_field(sig.physical_min, "physical_min", 8)?;
        push_field(&mut buf, &s, 8, "physical_min")?;
    }
    for sig in &header.signals {
        let s = format_f64_field(sig.physical_max, "physical_max", 8)?;
        push_field(&mut buf, &s, 8, "physical_max")?;
    }
    for sig in &header.signals {
        push_field(&mut buf, &sig.digital_min.to_string(), 8, "digital_min")?;
    }
    for sig in &header.signals {
        push_field(&mut buf, &sig.digital_max.to_string(), 8, "digital_max")?;
    }
    for sig in &header.signals {
        push_field(&mut buf, &sig.prefiltering, 80, "prefiltering")?;
    }
    for sig in &header.signals {
        push_field(&mut buf, &sig.samples_per_record.to_string(), 8, "samples_per_record")?;
    }
    for _ in &header.signals {
        push_field(&mut buf, "", 32, "signal_reserved")?;
    }
    debug_assert_eq!(buf.len(), HEADER_BYTES * (ns + 1));

    for r in 0..header.num_records {
        for (sig, data) in header.signals.iter().zip(digital) {
            let n = sig.samples_per_record;
            for &s in &data[r * n..(r + 1) * n] {
                buf.extend_from_slice(&s.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

/// Finds a channel by label, ignoring case and surrounding whitespace.
pub fn select_channel<'a>(recordings: &'a [Recording], label: &str) -> Result<&'a Recording> {
    let wanted = label.trim().to_ascii_lowercase();
    recordings
        .iter()
        .find(|r| r.channel_label.trim().to_ascii_lowercase() == wanted)
        .ok_or_else(|| Error::ChannelNotFound(label.to_string()))
}
