//! On-disk formats for [`LogitRecordSet`].
//!
//! `CPL1` binary layout, all integers and floats little-endian:
//!
//! ```text
//! offset 0        b"CPL1"
//! offset 4        u32 N
//! offset 8        u32 K
//! offset 12       N x u32 labels, one-based
//! ...             N*K x f32 logits, row-major
//! ...             u32 byte length L, then L bytes of UTF-8 JSON metadata
//! ```
//!
//! The CSV alternative has a header `label,logit_0,...,logit_{K-1}` and one
//! row per example with a one-based label.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CpError, Result};
use crate::records::{LogitRecordSet, RecordMetadata};

pub const MAGIC: &[u8; 4] = b"CPL1";

pub fn encode_cpl1(records: &LogitRecordSet) -> Result<Vec<u8>> {
    let n = u32::try_from(records.len()).map_err(|_| CpError::Data("too many records for CPL1".into()))?;
    let k = u32::try_from(records.num_classes()).map_err(|_| CpError::Data("too many classes for CPL1".into()))?;
    let meta = serde_json::to_vec(&records.metadata)?;
    let mut out = Vec::with_capacity(16 + records.len() * 4 + records.logits().len() * 4 + meta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    for &y in records.labels() {
        out.extend_from_slice(&(y as u32 + 1).to_le_bytes());
    }
    for &v in records.logits() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CpError::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: expected {len} bytes, found {}",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_cpl1(bytes: &[u8]) -> Result<LogitRecordSet> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CpError::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"CPL1\""),
        });
    }
    let n = r.u32("record count")? as usize;
    let k = r.u32("class count")? as usize;
    if k < 2 {
        return Err(CpError::Parse {
            offset: 8,
            message: format!("class count {k} is below 2"),
        });
    }
    let label_start = r.pos;
    let label_bytes = r.take(
        n.checked_mul(4).ok_or_else(|| overflow(label_start))?,
        "label section",
    )?;
    let mut labels = Vec::with_capacity(n);
    for (i, c) in label_bytes.chunks_exact(4).enumerate() {
        let y = u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize;
        if y == 0 || y > k {
            return Err(CpError::Parse {
                offset: (label_start + 4 * i) as u64,
                message: format!("label {y} of record {i} outside 1..={k}"),
            });
        }
        labels.push(y - 1);
    }
    let logit_start = r.pos;
    let cells = n.checked_mul(k).and_then(|c| c.checked_mul(4)).ok_or_else(|| overflow(logit_start))?;
    let logit_bytes = r.take(cells, "logit section")?;
    let mut logits = Vec::with_capacity(n * k);
    for (i, c) in logit_bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(CpError::Parse {
                offset: (logit_start + 4 * i) as u64,
                message: format!("non-finite logit {v} at record {}, class {}", i / k, i % k),
            });
        }
        logits.push(v);
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_start = r.pos;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let metadata: RecordMetadata = if meta_bytes.is_empty() {
        RecordMetadata::default()
    } else {
        serde_json::from_slice(meta_bytes).map_err(|e| CpError::Parse {
            offset: meta_start as u64,
            message: format!("metadata is not valid JSON: {e}"),
        })?
    };
    if r.pos != bytes.len() {
        return Err(CpError::Parse {
            offset: r.pos as u64,
            message: format!("{} trailing bytes after metadata", bytes.len() - r.pos),
        });
    }
    LogitRecordSet::with_metadata(k, labels, logits, metadata)
}

fn overflow(offset: usize) -> CpError {
    CpError::Parse {
        offset: offset as u64,
        message: "section size overflows".into(),
    }
}

pub fn to_csv(records: &LogitRecordSet) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("label".to_string()).chain((0..records.num_classes()).map(|k| format!("logit_{k}")));
    // writes into a Vec cannot fail
    w.write_record(header).expect("in-memory write");
    for (row, &y) in records.rows().zip(records.labels()) {
        // `{}` on f32 prints the shortest string that round-trips
        let fields = std::iter::once((y + 1).to_string()).chain(row.iter().map(|v| v.to_string()));
        w.write_record(fields).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV output is UTF-8")
}

fn csv_error(e: csv::Error) -> CpError {
    CpError::Parse {
        offset: e.position().map_or(0, |p| p.byte()),
        message: e.to_string(),
    }
}

pub fn from_csv(text: &str) -> Result<LogitRecordSet> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.get(0) != Some("label") || header.len() < 3 {
        return Err(CpError::Parse {
            offset: 0,
            message: "CSV header must be label,logit_0,...,logit_{K-1} with K >= 2".into(),
        });
    }
    let k = header.len() - 1;
    let mut labels = Vec::new();
    let mut logits = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let here = record.position().map_or(0, |p| p.byte());
        let bad = |message: String| CpError::Parse { offset: here, message };
        let y: usize = record[0].parse().map_err(|_| bad(format!("bad label {:?}", &record[0])))?;
        if y == 0 || y > k {
            return Err(bad(format!("label {y} outside 1..={k}")));
        }
        labels.push(y - 1);
        for f in record.iter().skip(1) {
            let v: f32 = f.parse().map_err(|_| bad(format!("bad logit {f:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite logit {f}")));
            }
            logits.push(v);
        }
    }
    LogitRecordSet::new(k, labels, logits)
}

/// Loads CPL1 (detected by magic) or CSV.
pub fn load_records(path: impl AsRef<Path>) -> Result<LogitRecordSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CpError::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        return decode_cpl1(&bytes);
    }
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let text = String::from_utf8(bytes).map_err(|e| CpError::Parse {
            offset: e.utf8_error().valid_up_to() as u64,
            message: "CSV is not valid UTF-8".into(),
        })?;
        let mut records = from_csv(&text)?;
        records.metadata.dataset = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        return Ok(records);
    }
    decode_cpl1(&bytes)
}

/// Writes CPL1, or CSV when the extension is `.csv`.
pub fn save_records(path: impl AsRef<Path>, records: &LogitRecordSet) -> Result<()> {
    let path = path.as_ref();
    let bytes = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        to_csv(records).into_bytes()
    } else {
        encode_cpl1(records)?
    };
    let mut f = fs::File::create(path).map_err(|e| CpError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CpError::io(path, e))
}
