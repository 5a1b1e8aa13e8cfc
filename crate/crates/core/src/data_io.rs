//! Embedding sets, annotations, and their on-disk formats.
//!
//! Embedding CSV: header `recording_id,segment_id,start,duration,speaker,e0,...,e{d-1}`,
//! one row per segment, `speaker` empty when unlabeled. Values are written in
//! shortest round-trip decimal form, so reading back yields the same `f64`s.
//!
//! Embedding binary (`MBNE`): magic, version byte, little-endian `u32` n and d,
//! n·d little-endian `f64` values in row-major order, then a little-endian `u64`
//! byte length followed by a UTF-8 block holding the five metadata columns in
//! the CSV layout above (header included).
//!
//! RTTM: NIST `SPEAKER` lines with ten whitespace-separated fields; times are
//! written with two decimals.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const META_COLUMNS: [&str; 5] = ["recording_id", "segment_id", "start", "duration", "speaker"];
const BINARY_MAGIC: &[u8; 4] = b"MBNE";
const BINARY_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Csv,
    Binary,
}

impl EmbeddingFormat {
    /// `.bin` / `.mbne` select the binary layout, everything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("mbne") => EmbeddingFormat::Binary,
            _ => EmbeddingFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub recording_id: String,
    pub segment_id: String,
    pub start: f64,
    pub duration: f64,
    pub speaker: Option<String>,
}

impl SegmentRecord {
    pub fn new(
        recording_id: impl Into<String>,
        segment_id: impl Into<String>,
        start: f64,
        duration: f64,
        speaker: Option<String>,
    ) -> Self {
        SegmentRecord {
            recording_id: recording_id.into(),
            segment_id: segment_id.into(),
            start,
            duration,
            speaker,
        }
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.start.is_finite() && self.start >= 0.0) {
            return Err(format!("start must be finite and non-negative, got {}", self.start));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(format!("duration must be finite and positive, got {}", self.duration));
        }
        Ok(())
    }
}

/// Segment-level embeddings: one row of `vectors` per record.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    records: Vec<SegmentRecord>,
    vectors: DMatrix<f64>,
}

impl EmbeddingSet {
    /// Builds a set, checking every invariant.
    pub fn new(records: Vec<SegmentRecord>, vectors: DMatrix<f64>) -> Result<Self> {
        if records.len() != vectors.nrows() {
            return Err(Error::invalid(format!(
                "{} records but {} vector rows",
                records.len(),
                vectors.nrows()
            )));
        }
        if vectors.ncols() == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            rec.validate().map_err(|m| Error::parse("embedding set", i + 1, m))?;
            if !seen.insert((rec.recording_id.as_str(), rec.segment_id.as_str())) {
                return Err(Error::parse(
                    "embedding set",
                    i + 1,
                    format!("duplicate segment ({}, {})", rec.recording_id, rec.segment_id),
                ));
            }
            if let Some(j) = vectors.row(i).iter().position(|v| !v.is_finite()) {
                return Err(Error::parse("embedding set", i + 1, format!("non-finite value in column e{j}")));
            }
        }
        Ok(EmbeddingSet { records, vectors })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(Vec::new(), DMatrix::zeros(0, dim))
    }

    pub fn records(&self) -> &[SegmentRecord] {
        &self.records
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn into_parts(self) -> (Vec<SegmentRecord>, DMatrix<f64>) {
        (self.records, self.vectors)
    }

    /// Speaker labels, or `None` if any record is unlabeled.
    pub fn speaker_labels(&self) -> Option<Vec<&str>> {
        self.records.iter().map(|r| r.speaker.as_deref()).collect()
    }

    /// Row indices grouped by recording, in order of first appearance.
    pub fn recordings(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for (i, rec) in self.records.iter().enumerate() {
            match pos.get(rec.recording_id.as_str()) {
                Some(&p) => order[p].1.push(i),
                None => {
                    pos.insert(rec.recording_id.as_str(), order.len());
                    order.push((rec.recording_id.clone(), vec![i]));
                }
            }
        }
        order
    }

    pub fn subset(&self, rows: &[usize]) -> EmbeddingSet {
        let records = rows.iter().map(|&i| self.records[i].clone()).collect();
        let vectors = self.vectors.select_rows(rows.iter());
        EmbeddingSet { records, vectors }
    }

    /// Concatenates sets of equal dimension.
    pub fn concat(parts: &[EmbeddingSet]) -> Result<EmbeddingSet> {
        let dim = parts
            .first()
            .map(|p| p.dim())
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let n: usize = parts.iter().map(|p| p.len()).sum();
        let mut vectors = DMatrix::zeros(n, dim);
        let mut records = Vec::with_capacity(n);
        let mut row = 0;
        for p in parts {
            if p.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: p.dim() });
            }
            vectors.rows_mut(row, p.len()).copy_from(&p.vectors);
            records.extend(p.records.iter().cloned());
            row += p.len();
        }
        EmbeddingSet::new(records, vectors)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationEntry {
    pub recording_id: String,
    pub start: f64,
    pub duration: f64,
    pub speaker: String,
}

impl AnnotationEntry {
    pub fn new(recording_id: impl Into<String>, start: f64, duration: f64, speaker: impl Into<String>) -> Self {
        AnnotationEntry {
            recording_id: recording_id.into(),
            start,
            duration,
            speaker: speaker.into(),
        }
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Time-stamped speaker turns. Entries of one recording may overlap.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotation {
    pub entries: Vec<AnnotationEntry>,
}

impl Annotation {
    pub fn new(entries: Vec<AnnotationEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if !(e.duration.is_finite() && e.duration > 0.0 && e.start.is_finite()) {
                return Err(Error::parse(
                    "annotation",
                    i + 1,
                    format!("invalid interval start={} duration={}", e.start, e.duration),
                ));
            }
        }
        Ok(Annotation { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn recording_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .map(|e| e.recording_id.as_str())
            .filter(|r| seen.insert(*r))
            .collect()
    }

    /// Distinct speakers of one recording, in order of first appearance.
    pub fn speakers(&self, recording_id: &str) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| e.recording_id == recording_id)
            .map(|e| e.speaker.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    pub fn for_recording(&self, recording_id: &str) -> Annotation {
        Annotation {
            entries: self
                .entries
                .iter()
                .filter(|e| e.recording_id == recording_id)
                .cloned()
                .collect(),
        }
    }

    /// Turns labeled segments into non-overlapping speaker turns.
    ///
    /// Overlapping neighbouring windows are split at the midpoint of their
    /// overlap; adjacent pieces with the same speaker are merged.
    pub fn from_segments<S: AsRef<str>>(records: &[SegmentRecord], speakers: &[S]) -> Result<Self> {
        if records.len() != speakers.len() {
            return Err(Error::DimensionMismatch {
                expected: records.len(),
                found: speakers.len(),
            });
        }
        let mut by_rec: Vec<(&str, Vec<usize>)> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            let p = *pos.entry(r.recording_id.as_str()).or_insert_with(|| {
                by_rec.push((r.recording_id.as_str(), Vec::new()));
                by_rec.len() - 1
            });
            by_rec[p].1.push(i);
        }

        let mut entries = Vec::new();
        for (rec_id, mut idx) in by_rec {
            idx.sort_by(|&a, &b| records[a].start.total_cmp(&records[b].start).then(a.cmp(&b)));
            let mut pieces: Vec<(f64, f64, &str)> = Vec::with_capacity(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                let r = &records[i];
                let mut lo = r.start;
                let mut hi = r.end();
                if k > 0 {
                    let prev = &records[idx[k - 1]];
                    if prev.end() > r.start {
                        lo = 0.5 * (r.start + prev.end());
                    }
                }
                if let Some(&j) = idx.get(k + 1) {
                    let next = &records[j];
                    if r.end() > next.start {
                        hi = 0.5 * (next.start + r.end());
                    }
                }
                if hi > lo {
                    pieces.push((lo, hi, speakers[i].as_ref()));
                }
            }
            let mut cur: Option<(f64, f64, &str)> = None;
            for (lo, hi, spk) in pieces {
                cur = match cur {
                    Some((clo, chi, cspk)) if cspk == spk && lo <= chi => Some((clo, chi.max(hi), cspk)),
                    Some((clo, chi, cspk)) => {
                        entries.push(AnnotationEntry::new(rec_id, clo, chi - clo, cspk));
                        Some((lo, hi, spk))
                    }
                    None => Some((lo, hi, spk)),
                };
            }
            if let Some((clo, chi, cspk)) = cur {
                entries.push(AnnotationEntry::new(rec_id, clo, chi - clo, cspk));
            }
        }
        Annotation::new(entries)
    }
}

/// Shortest decimal text that parses back to the same `f64`.
pub(crate) fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

pub fn read_embeddings(path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        EmbeddingFormat::Csv => parse_embeddings_csv(&bytes),
        EmbeddingFormat::Binary => decode_embeddings_binary(&bytes),
    }
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        EmbeddingFormat::Csv => embeddings_to_csv(set),
        EmbeddingFormat::Binary => encode_embeddings_binary(set),
    };
    write_atomic(path, &bytes)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn metadata_csv(records: &[SegmentRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .map(|r| {
            vec![
                r.recording_id.clone(),
                r.segment_id.clone(),
                fmt_f64(r.start),
                fmt_f64(r.duration),
                r.speaker.clone().unwrap_or_default(),
            ]
        })
        .collect()
}

pub fn embeddings_to_csv(set: &EmbeddingSet) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..set.dim()).map(|j| format!("e{j}")));
    w.write_record(&header).expect("writing to memory");
    for (i, mut row) in metadata_csv(&set.records).into_iter().enumerate() {
        row.extend(set.vectors.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).expect("writing to memory");
    }
    w.into_inner().expect("writing to memory")
}

fn parse_f64(field: &str, what: &str, row: usize, context: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(context, row, format!("cannot parse {what} '{field}'")))
}

fn check_metadata_header(header: &csv::StringRecord, context: &str) -> Result<()> {
    for (j, name) in META_COLUMNS.iter().enumerate() {
        if header.get(j) != Some(*name) {
            return Err(Error::parse(
                context,
                0,
                format!("header column {j} must be '{name}', found '{}'", header.get(j).unwrap_or("")),
            ));
        }
    }
    Ok(())
}

fn record_from_fields(fields: &csv::StringRecord, row: usize, context: &str) -> Result<SegmentRecord> {
    let start = parse_f64(&fields[2], "start", row, context)?;
    let duration = parse_f64(&fields[3], "duration", row, context)?;
    let speaker = match &fields[4] {
        "" => None,
        s => Some(s.to_string()),
    };
    let rec = SegmentRecord::new(&fields[0], &fields[1], start, duration, speaker);
    rec.validate().map_err(|m| Error::parse(context, row, m))?;
    Ok(rec)
}

pub fn parse_embeddings_csv(bytes: &[u8]) -> Result<EmbeddingSet> {
    const CTX: &str = "embedding csv";
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(bytes);
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(CTX, 0, e.to_string()))?
        .clone();
    check_metadata_header(&header, CTX)?;
    let dim = header.len() - META_COLUMNS.len();
    for j in 0..dim {
        let expect = format!("e{j}");
        if header.get(META_COLUMNS.len() + j) != Some(expect.as_str()) {
            return Err(Error::parse(CTX, 0, format!("expected header column '{expect}'")));
        }
    }
    if dim == 0 {
        return Err(Error::parse(CTX, 0, "header declares no embedding columns"));
    }

    let mut records = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashSet::new();
    for (i, fields) in rdr.records().enumerate() {
        let row = i + 1;
        let fields = fields.map_err(|e| Error::parse(CTX, row, e.to_string()))?;
        if fields.len() != header.len() {
            return Err(Error::parse(
                CTX,
                row,
                format!(
                    "dimension mismatch: {} embedding fields, header declares {dim}",
                    fields.len().saturating_sub(META_COLUMNS.len())
                ),
            ));
        }
        let rec = record_from_fields(&fields, row, CTX)?;
        if !seen.insert((rec.recording_id.clone(), rec.segment_id.clone())) {
            return Err(Error::parse(
                CTX,
                row,
                format!("duplicate segment ({}, {})", rec.recording_id, rec.segment_id),
            ));
        }
        for j in 0..dim {
            let v = parse_f64(&fields[META_COLUMNS.len() + j], &format!("e{j}"), row, CTX)?;
            if !v.is_finite() {
                return Err(Error::parse(CTX, row, format!("non-finite value in column e{j}")));
            }
            values.push(v);
        }
        records.push(rec);
    }
    let n = records.len();
    EmbeddingSet::new(records, DMatrix::from_row_slice(n, dim, &values))
}

pub fn encode_embeddings_binary(set: &EmbeddingSet) -> Vec<u8> {
    let (n, d) = set.vectors.shape();
    let mut out = Vec::with_capacity(13 + 8 * n * d);
    out.extend_from_slice(BINARY_MAGIC);
    out.push(BINARY_VERSION);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for i in 0..n {
        for j in 0..d {
            out.extend_from_slice(&set.vectors[(i, j)].to_le_bytes());
        }
    }
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(META_COLUMNS).expect("writing to memory");
    for row in metadata_csv(&set.records) {
        w.write_record(&row).expect("writing to memory");
    }
    let meta = w.into_inner().expect("writing to memory");
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse("embedding binary", 0, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_embeddings_binary(bytes: &[u8]) -> Result<EmbeddingSet> {
    const CTX: &str = "embedding binary";
    let mut cur = ByteCursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != BINARY_MAGIC {
        return Err(Error::parse(CTX, 0, "bad magic, expected MBNE"));
    }
    let version = cur.take(1, "version")?[0];
    if version != BINARY_VERSION {
        return Err(Error::parse(CTX, 0, format!("unsupported version {version}")));
    }
    let n = cur.u32("row count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let mut values = Vec::with_capacity(n.saturating_mul(d).min(1 << 24));
    for i in 0..n {
        for j in 0..d {
            let v = cur.f64("values")?;
            if !v.is_finite() {
                return Err(Error::parse(CTX, i + 1, format!("non-finite value in column e{j}")));
            }
            values.push(v);
        }
    }
    let meta_len = cur.u64("metadata length")? as usize;
    let meta = cur.take(meta_len, "metadata")?;
    if cur.pos != bytes.len() {
        return Err(Error::parse(CTX, 0, "trailing bytes after metadata block"));
    }
    let text = std::str::from_utf8(meta).map_err(|e| Error::parse(CTX, 0, format!("metadata is not UTF-8: {e}")))?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::parse(CTX, 0, e.to_string()))?.clone();
    check_metadata_header(&header, CTX)?;
    let mut records = Vec::with_capacity(n);
    for (i, fields) in rdr.records().enumerate() {
        let fields = fields.map_err(|e| Error::parse(CTX, i + 1, e.to_string()))?;
        records.push(record_from_fields(&fields, i + 1, CTX)?);
    }
    if records.len() != n {
        return Err(Error::parse(
            CTX,
            0,
            format!("metadata has {} rows, header declares {n}", records.len()),
        ));
    }
    EmbeddingSet::new(records, DMatrix::from_row_slice(n, d, &values))
}

/// Result of parsing RTTM text: the annotation plus the number of
/// non-`SPEAKER` lines that were skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct RttmParse {
    pub annotation: Annotation,
    pub skipped: usize,
}

pub fn read_rttm(path: impl AsRef<Path>) -> Result<Annotation> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = parse_rttm(&text)?;
    if parsed.skipped > 0 {
        log::warn!("{}: skipped {} non-SPEAKER lines", path.display(), parsed.skipped);
    }
    Ok(parsed.annotation)
}

/// Parses RTTM text. Blank lines are ignored; every other line is either
/// a parsed `SPEAKER` entry or counted in `skipped`.
pub fn parse_rttm(text: &str) -> Result<RttmParse> {
    const CTX: &str = "rttm";
    let mut entries = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields[0] != "SPEAKER" {
            skipped += 1;
            continue;
        }
        if fields.len() < 8 {
            return Err(Error::parse(CTX, line_no, format!("expected 10 fields, found {}", fields.len())));
        }
        let start = parse_f64(fields[3], "start time", line_no, CTX)?;
        let duration = parse_f64(fields[4], "duration", line_no, CTX)?;
        if !(start.is_finite() && start >= 0.0 && duration.is_finite() && duration > 0.0) {
            return Err(Error::parse(
                CTX,
                line_no,
                format!("invalid interval start={start} duration={duration}"),
            ));
        }
        entries.push(AnnotationEntry::new(fields[1], start, duration, fields[7]));
    }
    Ok(RttmParse {
        annotation: Annotation { entries },
        skipped,
    })
}

pub fn rttm_to_string(ann: &Annotation) -> String {
    let mut s = String::new();
    for e in &ann.entries {
        s.push_str(&format!(
            "SPEAKER {} 1 {:.2} {:.2} <NA> <NA> {} <NA> <NA>\n",
            e.recording_id, e.start, e.duration, e.speaker
        ));
    }
    s
}

pub fn write_rttm(ann: &Annotation, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), rttm_to_string(ann).as_bytes())
}
