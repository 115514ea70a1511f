//! Line-delimited JSON record streams with reject sinks and dataset manifests.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Dialogue, Document, Domain, Language};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("read error in {path} at line {line}: {source}")]
    Read { path: PathBuf, line: usize, source: io::Error },
    #[error("write error on {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("cannot serialize record: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// A record type that can travel through line-delimited files.
pub trait Record: Serialize + DeserializeOwned {
    /// Ids must be unique within a file when present.
    fn record_id(&self) -> Option<&str> {
        None
    }

    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

impl Record for Document {
    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }

    fn check(&self) -> Result<(), String> {
        self.validate().map_err(|e| e.to_string())
    }
}

impl Record for Dialogue {
    fn record_id(&self) -> Option<&str> {
        Some(&self.id)
    }
}

impl Record for serde_json::Value {}

/// A line that could not be turned into a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectRecord {
    /// 1-based line number in the source file.
    pub line: usize,
    pub reason: String,
    pub raw: String,
}

impl Record for RejectRecord {}

#[derive(Debug)]
pub enum Line<T> {
    Record(T),
    Reject(RejectRecord),
}

/// Streams records in file order. Blank lines are skipped; malformed lines
/// become [`Line::Reject`] instead of aborting the stream.
pub struct RecordReader<T, R = BufReader<File>> {
    reader: R,
    path: PathBuf,
    line: usize,
    seen_ids: HashSet<String>,
    buf: String,
    _record: PhantomData<T>,
}

impl<T: Record> RecordReader<T> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|source| IngestError::Open { path: path.clone(), source })?;
        Ok(Self::from_reader(BufReader::new(file), path))
    }
}

impl<T: Record, R: BufRead> RecordReader<T, R> {
    pub fn from_reader(reader: R, path: PathBuf) -> Self {
        RecordReader { reader, path, line: 0, seen_ids: HashSet::new(), buf: String::new(), _record: PhantomData }
    }

    fn parse(&mut self, raw: &str) -> Line<T> {
        let reject = |reason: String| RejectRecord { line: self.line, reason, raw: raw.to_string() };
        let record: T = match serde_json::from_str(raw) {
            Ok(r) => r,
            Err(e) => return Line::Reject(reject(format!("malformed record: {e}"))),
        };
        if let Err(reason) = record.check() {
            return Line::Reject(reject(reason));
        }
        if let Some(id) = record.record_id() {
            if !self.seen_ids.insert(id.to_string()) {
                return Line::Reject(reject(format!("duplicate id '{id}'")));
            }
        }
        Line::Record(record)
    }
}

impl<T: Record, R: BufRead> Iterator for RecordReader<T, R> {
    type Item = Result<Line<T>, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    self.line += 1;
                    let raw = self.buf.trim_end_matches(['\n', '\r']).to_string();
                    if raw.trim().is_empty() {
                        continue;
                    }
                    return Some(Ok(self.parse(&raw)));
                }
                Err(source) => {
                    return Some(Err(IngestError::Read { path: self.path.clone(), line: self.line + 1, source }))
                }
            }
        }
    }
}

pub fn read_documents(path: impl AsRef<Path>) -> Result<RecordReader<Document>, IngestError> {
    RecordReader::open(path)
}

/// Reads a whole file, splitting records from rejects.
pub fn read_all<T: Record>(path: impl AsRef<Path>) -> Result<(Vec<T>, Vec<RejectRecord>), IngestError> {
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    for item in RecordReader::<T>::open(path)? {
        match item? {
            Line::Record(r) => records.push(r),
            Line::Reject(r) => rejects.push(r),
        }
    }
    Ok((records, rejects))
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
    bytes: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteSummary {
    pub records: u64,
    pub bytes: u64,
    pub sha256: String,
}

/// Writes records to a temporary sibling and renames it into place on
/// [`RecordWriter::finish`]. Dropping an unfinished writer deletes the partial file.
pub struct RecordWriter {
    target: PathBuf,
    tmp: PathBuf,
    out: Option<HashingWriter<BufWriter<File>>>,
    records: u64,
}

impl RecordWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let target = path.as_ref().to_path_buf();
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = target.with_file_name(format!(".{name}.partial"));
        let file = File::create(&tmp).map_err(|source| IngestError::Write { path: tmp.clone(), source })?;
        Ok(RecordWriter {
            target,
            tmp,
            out: Some(HashingWriter { inner: BufWriter::new(file), hasher: Sha256::new(), bytes: 0 }),
            records: 0,
        })
    }

    pub fn write<T: Serialize + ?Sized>(&mut self, record: &T) -> Result<(), IngestError> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let out = self.out.as_mut().expect("writer used after finish");
        out.write_all(&line).map_err(|source| IngestError::Write { path: self.tmp.clone(), source })?;
        self.records += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<WriteSummary, IngestError> {
        let mut out = self.out.take().expect("finish called twice");
        out.flush().map_err(|source| IngestError::Write { path: self.tmp.clone(), source })?;
        let sha256 = hex::encode(out.hasher.finalize_reset());
        let bytes = out.bytes;
        drop(out);
        fs::rename(&self.tmp, &self.target)
            .map_err(|source| IngestError::Write { path: self.target.clone(), source })?;
        Ok(WriteSummary { records: self.records, bytes, sha256 })
    }
}

impl Drop for RecordWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

pub fn write_records<'a, T, I>(path: impl AsRef<Path>, records: I) -> Result<WriteSummary, IngestError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut w = RecordWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

pub fn cell_key(domain: Domain, language: Language) -> String {
    format!("{domain}/{language}")
}

/// Summary of a written document file. `path` is the file name, resolved
/// relative to wherever the manifest sits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: String,
    pub record_count: u64,
    /// Keyed by `"<domain>/<language>"`.
    pub token_totals: BTreeMap<String, u64>,
    pub checksum: String,
}

impl DatasetManifest {
    pub fn total_tokens(&self) -> u64 {
        self.token_totals.values().sum()
    }

    /// Recomputes a manifest from the file bytes alone, without the typed
    /// reader. Lines that are not objects with `domain`, `language` and
    /// `token_count` are counted but contribute no tokens.
    pub fn scan(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| IngestError::Open { path: path.to_path_buf(), source })?;
        let mut totals = BTreeMap::new();
        let mut count = 0;
        for line in bytes.split(|&b| b == b'\n') {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            count += 1;
            let Ok(v) = serde_json::from_slice::<serde_json::Value>(line) else { continue };
            if let (Some(d), Some(l), Some(t)) =
                (v["domain"].as_str(), v["language"].as_str(), v["token_count"].as_u64())
            {
                *totals.entry(format!("{d}/{l}")).or_insert(0) += t;
            }
        }
        Ok(DatasetManifest {
            path: file_name(path),
            record_count: count,
            token_totals: totals,
            checksum: crate::hashing::sha256_hex(&bytes),
        })
    }

    pub fn sidecar_path(dataset: &Path) -> PathBuf {
        sidecar(dataset, "manifest.json")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IngestError> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        read_json(path)
    }
}

pub(crate) fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `out/data.jsonl` + `"rejected.jsonl"` -> `out/data.rejected.jsonl`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let name = file_name(path);
    let stem = name.strip_suffix(".jsonl").or_else(|| name.strip_suffix(".json")).unwrap_or(&name);
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<(), IngestError> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|source| IngestError::Write { path: path.to_path_buf(), source })
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, IngestError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| IngestError::Open { path: path.to_path_buf(), source })?;
    serde_json::from_slice(&bytes).map_err(IngestError::Serialize)
}

/// Writes documents in order and returns their manifest, computed in the same pass.
pub fn write_documents<'a, I>(docs: I, path: impl AsRef<Path>) -> Result<DatasetManifest, IngestError>
where
    I: IntoIterator<Item = &'a Document>,
{
    let path = path.as_ref();
    let mut w = RecordWriter::create(path)?;
    let mut totals = BTreeMap::new();
    for d in docs {
        w.write(d)?;
        *totals.entry(cell_key(d.domain, d.language)).or_insert(0) += d.token_count;
    }
    let summary = w.finish()?;
    Ok(DatasetManifest {
        path: file_name(path),
        record_count: summary.records,
        token_totals: totals,
        checksum: summary.sha256,
    })
}
