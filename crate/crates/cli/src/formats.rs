//! On-disk formats: the `VSTR` token stream, the `VSMS` memory snapshot,
//! and the JSON metadata sidecar written next to generated streams.
//!
//! Both binary formats are little-endian with `f32` row storage and are
//! required to round-trip bit-exactly. Parsers report the byte offset of
//! the first malformed field. All writes go through [`atomic_write`]
//! (temp file + rename), so readers never observe a partial file.
//!
//! Stream layout: magic `VSTR`, `u32` version (= 1), `u32` dim,
//! `u32` frame count; per frame `u32` n_visual, `u32` n_audio, then
//! `(n_visual+n_audio)·dim` `f32` values row-major, visual rows first.
//!
//! Snapshot layout: magic `VSMS`, `u32` version (= 1), `u32` budget,
//! `u32` dim, `u32` row count, rows as `f32`, then one provenance record
//! per row: `u64` stream index + `u8` modality (0 visual, 1 audio).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vstream_core::memory::{MemoryState, Provenance};
use vstream_core::real::Real;
use vstream_core::ttt::Modality;
use vstream_core::Matrix;

const STREAM_MAGIC: &[u8; 4] = b"VSTR";
const SNAPSHOT_MAGIC: &[u8; 4] = b"VSMS";
const FORMAT_VERSION: u32 = 1;

/// Malformed-file error carrying the byte offset of the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub offset: u64,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse error at byte {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for ParseError {}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn fail<V>(&self, message: String) -> Result<V, ParseError> {
        Err(ParseError {
            offset: self.pos as u64,
            message,
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ParseError> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "file truncated: need {n} bytes for {what}, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ParseError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, ParseError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ParseError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn f32_rows(&mut self, rows: usize, dim: usize, what: &str) -> Result<Vec<f32>, ParseError> {
        let start = self.pos;
        let b = self.take(rows * dim * 4, what)?;
        let mut out = Vec::with_capacity(rows * dim);
        for (i, c) in b.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(ParseError {
                    offset: (start + i * 4) as u64,
                    message: format!("{what}: non-finite value {v}"),
                });
            }
            out.push(v);
        }
        Ok(out)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<(), ParseError> {
        let got = self.take(4, "magic")?;
        if got != expect {
            self.pos -= 4;
            return self.fail(format!(
                "bad magic {:?} (expected {:?})",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expect)
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), ParseError> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(ParseError {
                offset: at as u64,
                message: format!("unsupported version {v} (expected {FORMAT_VERSION})"),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), ParseError> {
        if self.pos != self.bytes.len() {
            return self.fail(format!(
                "{} trailing bytes after the last record",
                self.bytes.len() - self.pos
            ));
        }
        Ok(())
    }
}

/// One frame's rows, visual first, row-major with the file's dim.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFrame {
    pub visual: Vec<f32>,
    pub audio: Vec<f32>,
}

impl StreamFrame {
    pub fn n_visual(&self, dim: usize) -> usize {
        self.visual.len() / dim
    }

    pub fn n_audio(&self, dim: usize) -> usize {
        self.audio.len() / dim
    }
}

/// A parsed token stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamFile {
    pub dim: u32,
    pub frames: Vec<StreamFrame>,
}

impl StreamFile {
    pub fn total_rows(&self) -> usize {
        let d = self.dim as usize;
        self.frames
            .iter()
            .map(|f| f.n_visual(d) + f.n_audio(d))
            .sum()
    }

    /// All visual rows in stream order as one matrix of `T`, widened from
    /// the stored `f32` values.
    pub fn visual_matrix<T: Real>(&self) -> Result<Matrix<T>> {
        let d = self.dim as usize;
        let mut data = Vec::new();
        for f in &self.frames {
            data.extend(f.visual.iter().map(|&v| T::of(v as f64)));
        }
        let rows = data.len() / d.max(1);
        Ok(Matrix::from_vec(rows, d, data)?)
    }
}

pub fn encode_stream(s: &StreamFile) -> Vec<u8> {
    let d = s.dim as usize;
    let mut out = Vec::new();
    out.extend_from_slice(STREAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&s.dim.to_le_bytes());
    out.extend_from_slice(&(s.frames.len() as u32).to_le_bytes());
    for f in &s.frames {
        out.extend_from_slice(&(f.n_visual(d) as u32).to_le_bytes());
        out.extend_from_slice(&(f.n_audio(d) as u32).to_le_bytes());
        for v in f.visual.iter().chain(&f.audio) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_stream(bytes: &[u8]) -> Result<StreamFile, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(STREAM_MAGIC)?;
    r.version()?;
    let at = r.pos;
    let dim = r.u32("dim")?;
    if dim == 0 {
        return Err(ParseError {
            offset: at as u64,
            message: "dim must be positive".to_string(),
        });
    }
    let frame_count = r.u32("frame count")?;
    let mut frames = Vec::with_capacity(frame_count.min(1 << 20) as usize);
    for i in 0..frame_count {
        let n_visual = r.u32(&format!("frame {i} n_visual"))? as usize;
        let n_audio = r.u32(&format!("frame {i} n_audio"))? as usize;
        let visual = r.f32_rows(n_visual, dim as usize, &format!("frame {i} visual rows"))?;
        let audio = r.f32_rows(n_audio, dim as usize, &format!("frame {i} audio rows"))?;
        frames.push(StreamFrame { visual, audio });
    }
    r.finish()?;
    Ok(StreamFile { dim, frames })
}

pub fn write_stream(path: &Path, s: &StreamFile) -> Result<()> {
    atomic_write(path, &encode_stream(s))
}

pub fn read_stream(path: &Path) -> Result<StreamFile> {
    let bytes =
        fs::read(path).with_context(|| format!("reading stream {}", path.display()))?;
    parse_stream(&bytes).with_context(|| format!("in stream file {}", path.display()))
}

/// A serialized memory state: rows plus per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotFile {
    pub budget: u32,
    pub dim: u32,
    pub rows: Vec<f32>,
    pub provenance: Vec<(u64, u8)>,
}

pub const MODALITY_VISUAL: u8 = 0;
pub const MODALITY_AUDIO: u8 = 1;

impl SnapshotFile {
    pub fn from_memory<T: Real>(mem: &MemoryState<T>) -> Self {
        SnapshotFile {
            budget: mem.budget() as u32,
            dim: mem.dim() as u32,
            rows: mem
                .tokens()
                .as_slice()
                .iter()
                .map(|&v| Real::to_f64(v) as f32)
                .collect(),
            provenance: mem
                .provenance()
                .iter()
                .map(|p| {
                    let m = match p.modality {
                        Modality::Visual => MODALITY_VISUAL,
                        Modality::Audio => MODALITY_AUDIO,
                    };
                    (p.stream_index, m)
                })
                .collect(),
        }
    }

    pub fn to_memory<T: Real>(&self) -> Result<MemoryState<T>> {
        let d = self.dim as usize;
        let n = self.provenance.len();
        let tokens = Matrix::from_vec(n, d, self.rows.iter().map(|&v| T::of(v as f64)).collect())?;
        let provenance = self
            .provenance
            .iter()
            .map(|&(stream_index, m)| {
                let modality = match m {
                    MODALITY_VISUAL => Modality::Visual,
                    MODALITY_AUDIO => Modality::Audio,
                    other => anyhow::bail!("snapshot: unknown modality tag {other}"),
                };
                Ok(Provenance {
                    stream_index,
                    modality,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MemoryState::from_parts(
            self.budget as usize,
            tokens,
            provenance,
        )?)
    }
}

pub fn encode_snapshot(s: &SnapshotFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&s.budget.to_le_bytes());
    out.extend_from_slice(&s.dim.to_le_bytes());
    out.extend_from_slice(&(s.provenance.len() as u32).to_le_bytes());
    for v in &s.rows {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &(idx, m) in &s.provenance {
        out.extend_from_slice(&idx.to_le_bytes());
        out.push(m);
    }
    out
}

pub fn parse_snapshot(bytes: &[u8]) -> Result<SnapshotFile, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(SNAPSHOT_MAGIC)?;
    r.version()?;
    let budget_at = r.pos;
    let budget = r.u32("budget")?;
    let dim_at = r.pos;
    let dim = r.u32("dim")?;
    if budget == 0 || dim == 0 {
        return Err(ParseError {
            offset: (if budget == 0 { budget_at } else { dim_at }) as u64,
            message: "budget and dim must be positive".to_string(),
        });
    }
    let count_at = r.pos;
    let count = r.u32("row count")? as usize;
    if count > budget as usize {
        return Err(ParseError {
            offset: count_at as u64,
            message: format!("row count {count} exceeds budget {budget}"),
        });
    }
    let rows = r.f32_rows(count, dim as usize, "memory rows")?;
    let mut provenance = Vec::with_capacity(count);
    for i in 0..count {
        let idx = r.u64(&format!("provenance {i} stream index"))?;
        let at = r.pos;
        let m = r.u8(&format!("provenance {i} modality"))?;
        if m > MODALITY_AUDIO {
            return Err(ParseError {
                offset: at as u64,
                message: format!("provenance {i}: unknown modality tag {m}"),
            });
        }
        provenance.push((idx, m));
    }
    r.finish()?;
    Ok(SnapshotFile {
        budget,
        dim,
        rows,
        provenance,
    })
}

pub fn write_snapshot(path: &Path, s: &SnapshotFile) -> Result<()> {
    atomic_write(path, &encode_snapshot(s))
}

pub fn read_snapshot(path: &Path) -> Result<SnapshotFile> {
    let bytes =
        fs::read(path).with_context(|| format!("reading snapshot {}", path.display()))?;
    parse_snapshot(&bytes).with_context(|| format!("in snapshot file {}", path.display()))
}

/// Generation metadata written next to each stream as
/// `<stem>.meta.json`; analysis commands rebuild derived structures
/// (the associative codebook, the planted-row position) from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub kind: String,
    pub seed: u64,
    pub dim: usize,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub audio_per_frame: usize,
    pub frame_rate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle_stream_index: Option<u64>,
}

pub fn meta_path(stream_path: &Path) -> std::path::PathBuf {
    stream_path.with_extension("meta.json")
}

pub fn write_meta(stream_path: &Path, meta: &StreamMeta) -> Result<()> {
    let mut text = serde_json::to_string(meta)?;
    text.push('\n');
    atomic_write(&meta_path(stream_path), text.as_bytes())
}

pub fn read_meta(stream_path: &Path) -> Result<StreamMeta> {
    let p = meta_path(stream_path);
    let text =
        fs::read_to_string(&p).with_context(|| format!("reading metadata {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing metadata {}", p.display()))
}

/// Writes via a temp file in the target directory plus an atomic rename,
/// so a crash mid-write never leaves a truncated file behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .with_context(|| format!("creating temp file for {}", path.display()))?;
    tmp.write_all(bytes)
        .with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stream() -> StreamFile {
        StreamFile {
            dim: 3,
            frames: vec![
                StreamFrame {
                    visual: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                    audio: vec![7.0, 8.0, 9.0],
                },
                StreamFrame {
                    visual: vec![],
                    audio: vec![0.5, -0.5, 0.25],
                },
            ],
        }
    }

    #[test]
    fn stream_round_trip_is_bit_exact() {
        let s = sample_stream();
        let bytes = encode_stream(&s);
        let back = parse_stream(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_stream(&back), bytes);
    }

    #[test]
    fn stream_header_fields_are_checked() {
        let s = sample_stream();
        let mut bytes = encode_stream(&s);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let err = parse_stream(&bad_magic).unwrap_err();
        assert_eq!(err.offset, 0);

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        let err = parse_stream(&bad_version).unwrap_err();
        assert_eq!(err.offset, 4);

        bytes.truncate(bytes.len() - 2);
        let err = parse_stream(&bytes).unwrap_err();
        assert!(err.message.contains("truncated"), "{err}");
    }

    #[test]
    fn stream_rejects_trailing_and_non_finite() {
        let s = sample_stream();
        let mut bytes = encode_stream(&s);
        bytes.push(0);
        let err = parse_stream(&bytes).unwrap_err();
        assert!(err.message.contains("trailing"), "{err}");

        let mut nan = encode_stream(&s);
        // First visual value starts right after the two frame-count u32s
        // at offset 16 + 8 = 24.
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = parse_stream(&nan).unwrap_err();
        assert_eq!(err.offset, 24);
        assert!(err.message.contains("non-finite"), "{err}");
    }

    #[test]
    fn snapshot_round_trip_and_memory_conversion() {
        let snap = SnapshotFile {
            budget: 4,
            dim: 2,
            rows: vec![1.0, 2.0, 3.0, 4.0],
            provenance: vec![(10, MODALITY_VISUAL), (13, MODALITY_AUDIO)],
        };
        let bytes = encode_snapshot(&snap);
        let back = parse_snapshot(&bytes).unwrap();
        assert_eq!(back, snap);

        let mem = back.to_memory::<f64>().unwrap();
        assert_eq!(mem.budget(), 4);
        assert_eq!(mem.len(), 2);
        assert_eq!(mem.provenance()[1].stream_index, 13);
        assert_eq!(mem.provenance()[1].modality, Modality::Audio);
        let again = SnapshotFile::from_memory(&mem);
        assert_eq!(encode_snapshot(&again), bytes);
    }

    #[test]
    fn snapshot_rejects_bad_modality_and_overbudget() {
        let snap = SnapshotFile {
            budget: 4,
            dim: 2,
            rows: vec![1.0, 2.0],
            provenance: vec![(0, 7)],
        };
        let bytes = encode_snapshot(&snap);
        let err = parse_snapshot(&bytes).unwrap_err();
        assert!(err.message.contains("modality"), "{err}");
        // The modality byte sits after header (20) + row f32s (8) + index (8).
        assert_eq!(err.offset, 36);

        let over = SnapshotFile {
            budget: 1,
            dim: 2,
            rows: vec![1.0, 2.0, 3.0, 4.0],
            provenance: vec![(0, 0), (1, 0)],
        };
        assert!(parse_snapshot(&encode_snapshot(&over)).is_err());
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("file.bin");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
    }

    #[test]
    fn meta_sidecar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let stream = dir.path().join("stream.vstr");
        let meta = StreamMeta {
            kind: "associative-pairs".to_string(),
            seed: 9,
            dim: 8,
            frames: 4,
            tokens_per_frame: 4,
            audio_per_frame: 0,
            frame_rate: "1fps".to_string(),
            pair_count: Some(20),
            needle_stream_index: None,
        };
        write_meta(&stream, &meta).unwrap();
        assert_eq!(meta_path(&stream), dir.path().join("stream.meta.json"));
        let back = read_meta(&stream).unwrap();
        assert_eq!(back, meta);
    }

    #[test]
    fn visual_matrix_widens_in_order() {
        let s = sample_stream();
        let m = s.visual_matrix::<f64>().unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);
    }
}
