//! Binary feature archives.
//!
//! A record is the 4-byte magic `FMAT`, `u32` LE rows, `u32` LE cols, then
//! `rows·cols` `f32` LE values in row-major order. An archive file is a
//! concatenation of records, indexed by a `feats.scp` text file with lines
//! `<utt_id> <path>:<byte_offset>`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FMAT";

#[derive(Debug, Error)]
pub enum FmatError {
    #[error("{0}: bad magic")]
    BadMagic(String),
    #[error("{path}: line {lineno}: malformed index entry")]
    BadIndex { path: String, lineno: usize },
    #[error("no features for utterance {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Dense `f32` matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

pub fn write_record<W: Write>(w: &mut W, rows: usize, cols: usize, data: &[f32]) -> io::Result<u64> {
    assert_eq!(rows * cols, data.len(), "record shape");
    w.write_all(MAGIC)?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(12 + 4 * data.len() as u64)
}

pub fn read_record<R: Read>(r: &mut R, what: &str) -> Result<StoredMatrix, FmatError> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(FmatError::BadMagic(what.to_string()));
    }
    let rows = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut raw = vec![0u8; rows * cols * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(StoredMatrix { rows, cols, data })
}

/// Reads the record starting at `offset` in `path`.
pub fn read_at(path: &Path, offset: u64) -> Result<StoredMatrix, FmatError> {
    let mut f = File::open(path)?;
    f.seek(SeekFrom::Start(offset))?;
    read_record(&mut io::BufReader::new(f), &path.display().to_string())
}

/// Single-record file (used for CMVN statistics).
pub fn write_file(path: &Path, rows: usize, cols: usize, data: &[f32]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_record(&mut w, rows, cols, data)?;
    w.flush()
}

pub fn read_file(path: &Path) -> Result<StoredMatrix, FmatError> {
    read_at(path, 0)
}

/// Appends records to one archive file and tracks their offsets.
pub struct ArchiveWriter {
    path: PathBuf,
    out: BufWriter<File>,
    offset: u64,
    index: FeatsIndex,
}

impl ArchiveWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(ArchiveWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(File::create(path)?),
            offset: 0,
            index: FeatsIndex::default(),
        })
    }

    pub fn append(&mut self, utt_id: &str, rows: usize, cols: usize, data: &[f32]) -> io::Result<()> {
        let at = self.offset;
        self.offset += write_record(&mut self.out, rows, cols, data)?;
        self.index.entries.insert(
            utt_id.to_string(),
            IndexEntry {
                path: self.path.clone(),
                offset: at,
                rows,
                cols,
            },
        );
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<FeatsIndex> {
        self.out.flush()?;
        Ok(self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub path: PathBuf,
    pub offset: u64,
    /// Shape, when known without reading the archive.
    pub rows: usize,
    pub cols: usize,
}

impl IndexEntry {
    pub fn reference(&self) -> String {
        format!("{}:{}", self.path.display(), self.offset)
    }
}

/// `utt_id → archive location`, sorted by utterance id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatsIndex {
    pub entries: BTreeMap<String, IndexEntry>,
}

impl FeatsIndex {
    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut body = String::new();
        for (utt, e) in &self.entries {
            body.push_str(&format!("{utt} {}\n", e.reference()));
        }
        fs::write(path, body)
    }

    /// Parses `feats.scp`; shapes are read from each record header.
    pub fn read(path: &Path) -> Result<Self, FmatError> {
        let body = fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || FmatError::BadIndex {
                path: path.display().to_string(),
                lineno: i + 1,
            };
            let (utt, loc) = line.split_once(' ').ok_or_else(bad)?;
            let (file, off) = loc.trim().rsplit_once(':').ok_or_else(bad)?;
            let offset: u64 = off.parse().map_err(|_| bad())?;
            let file = PathBuf::from(file);
            let (rows, cols) = read_header(&file, offset)?;
            entries.insert(
                utt.to_string(),
                IndexEntry {
                    path: file,
                    offset,
                    rows,
                    cols,
                },
            );
        }
        Ok(FeatsIndex { entries })
    }

    pub fn load(&self, utt_id: &str) -> Result<StoredMatrix, FmatError> {
        let e = self.entries.get(utt_id).ok_or_else(|| FmatError::Missing(utt_id.to_string()))?;
        read_at(&e.path, e.offset)
    }
}

fn read_header(path: &Path, offset: u64) -> Result<(usize, usize), FmatError> {
    let mut f = File::open(path)?;
    f.seek(SeekFrom::Start(offset))?;
    let mut head = [0u8; 12];
    f.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(FmatError::BadMagic(path.display().to_string()));
    }
    Ok((
        u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize,
        u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize,
    ))
}
