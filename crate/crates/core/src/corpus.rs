//! Evidence corpus: MEDLINE/JSONL ingestion, cleaning rules and the on-disk
//! document store.
//!
//! A store is a directory holding two files:
//!
//! * `corpus.jsonl` - one [`Document`] per line, sorted by PMID.
//! * `corpus.idx` - `pmid\toffset` lines in the same order, where `offset` is
//!   the byte offset of the document's line in `corpus.jsonl`.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Datelike;
use flate2::read::MultiGzDecoder;
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const INDEX_FILE: &str = "corpus.idx";

/// MEDLINE appends this marker to abstracts cut at the length limit.
pub const TRUNCATION_MARKER: &str = "(ABSTRACT TRUNCATED";

pub const MIN_YEAR: i32 = 1800;

/// One biomedical abstract with the metadata used for retrieval and filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub pmid: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub year: Option<i32>,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citation_count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    NonEnglish,
    NoAbstract,
    TruncatedAbstract,
    Malformed(String),
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::NonEnglish => f.write_str("non-English record"),
            Rejection::NoAbstract => f.write_str("record has no abstract"),
            Rejection::TruncatedAbstract => f.write_str("abstract is truncated"),
            Rejection::Malformed(why) => write!(f, "malformed record: {why}"),
        }
    }
}

/// Tally of an ingestion run.
///
/// `accepted + rejected_*` always equals `records_seen`. `duplicates` counts
/// accepted records whose PMID had already been accepted in the same run; the
/// later record replaces the earlier one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records_seen: u64,
    pub accepted: u64,
    pub rejected_non_english: u64,
    pub rejected_no_abstract: u64,
    pub rejected_truncated_abstract: u64,
    pub rejected_malformed: u64,
    pub duplicates: u64,
}

impl CorpusStats {
    pub fn rejected(&self) -> u64 {
        self.rejected_non_english
            + self.rejected_no_abstract
            + self.rejected_truncated_abstract
            + self.rejected_malformed
    }

    fn tally(&mut self, outcome: &std::result::Result<Document, Rejection>) {
        self.records_seen += 1;
        match outcome {
            Ok(_) => self.accepted += 1,
            Err(Rejection::NonEnglish) => self.rejected_non_english += 1,
            Err(Rejection::NoAbstract) => self.rejected_no_abstract += 1,
            Err(Rejection::TruncatedAbstract) => self.rejected_truncated_abstract += 1,
            Err(Rejection::Malformed(_)) => self.rejected_malformed += 1,
        }
    }
}

/// A single input record in one of the two supported formats.
#[derive(Debug, Clone, Copy)]
pub enum RawRecord<'a> {
    /// A `<PubmedArticle>` or `<MedlineCitation>` fragment.
    Xml(&'a str),
    /// One line of JSONL with keys `pmid, title, abstract, language, year`.
    Json(&'a str),
}

pub fn parse_record(raw: RawRecord<'_>) -> std::result::Result<Document, Rejection> {
    match raw {
        RawRecord::Json(line) => parse_json_line(line),
        RawRecord::Xml(fragment) => {
            let mut outcomes = Vec::new();
            parse_medline(fragment.as_bytes(), |o| outcomes.push(o));
            match outcomes.len() {
                1 => outcomes.pop().unwrap(),
                0 => Err(Rejection::Malformed("no MedlineCitation element".into())),
                n => Err(Rejection::Malformed(format!("expected one article, found {n}"))),
            }
        }
    }
}

/// Fields pulled out of an input record before the cleaning rules run.
#[derive(Debug, Default)]
struct Extracted {
    pmid: Option<String>,
    title: String,
    abstract_sections: Vec<String>,
    language: Option<String>,
    year: Option<String>,
    medline_date: Option<String>,
}

impl Extracted {
    fn finish(self) -> std::result::Result<Document, Rejection> {
        let pmid = match self.pmid.map(|p| p.trim().to_string()) {
            Some(p) if !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()) => p,
            Some(p) => return Err(Rejection::Malformed(format!("invalid PMID {p:?}"))),
            None => return Err(Rejection::Malformed("missing PMID".into())),
        };
        let language = self
            .language
            .as_deref()
            .map(normalize_language)
            .unwrap_or_else(|| "unknown".to_string());
        if language != "en" {
            return Err(Rejection::NonEnglish);
        }
        let abstract_text = self
            .abstract_sections
            .iter()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        if abstract_text.is_empty() {
            return Err(Rejection::NoAbstract);
        }
        if abstract_text.contains(TRUNCATION_MARKER) {
            return Err(Rejection::TruncatedAbstract);
        }
        let year = self
            .year
            .as_deref()
            .and_then(|y| y.trim().parse::<i32>().ok())
            .or_else(|| self.medline_date.as_deref().and_then(first_four_digit_year))
            .filter(|y| valid_year(*y));
        Ok(Document {
            pmid,
            title: self.title.trim().to_string(),
            abstract_text,
            year,
            language,
            citation_count: None,
        })
    }
}

fn valid_year(year: i32) -> bool {
    let max = chrono::Utc::now().year() + 1;
    (MIN_YEAR..=max).contains(&year)
}

/// First run of exactly four ASCII digits, e.g. `"1998 Dec-1999 Jan"` -> 1998.
fn first_four_digit_year(text: &str) -> Option<i32> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i - start == 4 {
                return text[start..i].parse().ok();
            }
        } else {
            i += 1;
        }
    }
    None
}

/// Maps MEDLINE's ISO-639-2 codes onto ISO-639-1. Unknown codes pass through
/// lowercased; "und" and blanks become "unknown".
pub fn normalize_language(code: &str) -> String {
    let code = code.trim().to_ascii_lowercase();
    let mapped = match code.as_str() {
        "" | "und" | "unknown" => "unknown",
        "eng" => "en",
        "ger" | "deu" => "de",
        "fre" | "fra" => "fr",
        "spa" => "es",
        "ita" => "it",
        "jpn" => "ja",
        "rus" => "ru",
        "chi" | "zho" => "zh",
        "por" => "pt",
        "pol" => "pl",
        "dut" | "nld" => "nl",
        "kor" => "ko",
        "swe" => "sv",
        "tur" => "tr",
        "cze" | "ces" => "cs",
        "dan" => "da",
        "nor" => "no",
        "hun" => "hu",
        "fin" => "fi",
        "heb" => "he",
        "gre" | "ell" => "el",
        "ara" => "ar",
        other => other,
    };
    mapped.to_string()
}

fn parse_json_line(line: &str) -> std::result::Result<Document, Rejection> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| Rejection::Malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Rejection::Malformed("record is not a JSON object".into()))?;
    let text = |key: &str| -> std::result::Result<Option<String>, Rejection> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(Value::Number(n)) => Ok(Some(n.to_string())),
            Some(other) => Err(Rejection::Malformed(format!("field {key} has type {other}"))),
        }
    };
    Extracted {
        pmid: text("pmid")?,
        title: text("title")?.unwrap_or_default(),
        abstract_sections: text("abstract")?.into_iter().collect(),
        language: text("language")?,
        year: text("year")?,
        medline_date: None,
    }
    .finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Capture {
    Pmid,
    Title,
    AbstractText,
    Language,
    Year,
    MedlineDate,
}

/// Streams MEDLINE XML, calling `emit` once per `MedlineCitation`.
///
/// A syntax error ends the stream with a single `Malformed` outcome.
fn parse_medline<R: BufRead>(input: R, mut emit: impl FnMut(std::result::Result<Document, Rejection>)) {
    let mut reader = Reader::from_reader(input);
    reader.config_mut().trim_text(false);
    let mut buf = Vec::new();
    let mut path: Vec<Vec<u8>> = Vec::new();
    let mut current: Option<Extracted> = None;
    let mut capture: Option<(Capture, usize, String)> = None;

    loop {
        let event = match reader.read_event_into(&mut buf) {
            Ok(ev) => ev,
            Err(e) => {
                emit(Err(Rejection::Malformed(format!(
                    "XML error at byte {}: {e}",
                    reader.error_position()
                ))));
                return;
            }
        };
        match event {
            Event::Start(e) => {
                let name = e.name().as_ref().to_vec();
                let parent = path.last().map(Vec::as_slice);
                if name == b"MedlineCitation" {
                    current = Some(Extracted::default());
                } else if current.is_some() && capture.is_none() {
                    let grandparent = path.len().checked_sub(2).map(|i| path[i].as_slice());
                    let field = match (name.as_slice(), parent, grandparent) {
                        (b"PMID", Some(b"MedlineCitation"), _) => Some(Capture::Pmid),
                        (b"ArticleTitle", Some(b"Article"), _) => Some(Capture::Title),
                        (b"AbstractText", Some(b"Abstract"), Some(b"Article")) => {
                            Some(Capture::AbstractText)
                        }
                        (b"Language", Some(b"Article"), _) => Some(Capture::Language),
                        (b"Year", Some(b"PubDate"), _) => Some(Capture::Year),
                        (b"MedlineDate", Some(b"PubDate"), _) => Some(Capture::MedlineDate),
                        _ => None,
                    };
                    if let Some(field) = field {
                        capture = Some((field, path.len(), String::new()));
                    }
                }
                path.push(name);
            }
            Event::End(_) => {
                let closed = path.pop();
                if let Some((field, depth, _)) = &capture {
                    if *depth == path.len() {
                        let field = *field;
                        let (_, _, text) = capture.take().unwrap();
                        if let Some(article) = current.as_mut() {
                            store_field(article, field, text);
                        }
                    }
                }
                if closed.as_deref() == Some(b"MedlineCitation".as_slice()) {
                    if let Some(article) = current.take() {
                        emit(article.finish());
                    }
                }
            }
            Event::Text(t) => {
                if let Some((_, _, text)) = capture.as_mut() {
                    match t.unescape() {
                        Ok(s) => text.push_str(&s),
                        Err(_) => text.push_str(&String::from_utf8_lossy(&t)),
                    }
                }
            }
            Event::CData(t) => {
                if let Some((_, _, text)) = capture.as_mut() {
                    text.push_str(&String::from_utf8_lossy(&t));
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    if current.is_some() {
        emit(Err(Rejection::Malformed("unterminated MedlineCitation".into())));
    }
}

fn store_field(article: &mut Extracted, field: Capture, text: String) {
    match field {
        Capture::Pmid => {
            article.pmid.get_or_insert(text);
        }
        Capture::Title => article.title = text,
        Capture::AbstractText => article.abstract_sections.push(text),
        Capture::Language => {
            // First declared language decides; MEDLINE lists the original first.
            article.language.get_or_insert(text);
        }
        Capture::Year => {
            article.year.get_or_insert(text);
        }
        Capture::MedlineDate => {
            article.medline_date.get_or_insert(text);
        }
    }
}

/// Orders PMIDs by numeric value (leading zeros ignored), falling back to
/// byte order for equal-length digit strings.
pub fn pmid_cmp(a: &str, b: &str) -> Ordering {
    let a = a.trim_start_matches('0');
    let b = b.trim_start_matches('0');
    a.len().cmp(&b.len()).then_with(|| a.cmp(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InputFormat {
    Xml,
    Jsonl,
}

fn open_input(path: &Path) -> Result<(InputFormat, Box<dyn BufRead>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let (stem, gz) = match name.strip_suffix(".gz") {
        Some(stem) => (stem.to_string(), true),
        None => (name.clone(), false),
    };
    let mut reader: Box<dyn BufRead> = if gz {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let format = if stem.ends_with(".xml") {
        InputFormat::Xml
    } else if stem.ends_with(".jsonl") || stem.ends_with(".json") {
        InputFormat::Jsonl
    } else {
        let head = reader.fill_buf().map_err(|e| Error::io(path, e))?;
        match head.iter().find(|b| !b.is_ascii_whitespace()) {
            Some(b'<') => InputFormat::Xml,
            _ => InputFormat::Jsonl,
        }
    };
    Ok((format, reader))
}

/// Reads every input file, applies the cleaning rules and writes a fresh store
/// at `store_dir`. Within one run the last record for a PMID wins.
pub fn ingest<P: AsRef<Path>>(inputs: &[P], store_dir: &Path) -> Result<CorpusStats> {
    fs::create_dir_all(store_dir).map_err(|e| Error::io(store_dir, e))?;
    let staging_path = store_dir.join("corpus.jsonl.staging");
    let staging = File::create(&staging_path).map_err(|e| Error::io(&staging_path, e))?;
    let mut staging = BufWriter::new(staging);
    let mut offsets: HashMap<String, u64> = HashMap::new();
    let mut written: u64 = 0;
    let mut stats = CorpusStats::default();

    let mut accept = |outcome: std::result::Result<Document, Rejection>,
                      stats: &mut CorpusStats|
     -> std::io::Result<()> {
        stats.tally(&outcome);
        match outcome {
            Ok(doc) => {
                let line = serde_json::to_string(&doc).expect("Document serializes");
                if offsets.insert(doc.pmid.clone(), written).is_some() {
                    stats.duplicates += 1;
                }
                staging.write_all(line.as_bytes())?;
                staging.write_all(b"\n")?;
                written += line.len() as u64 + 1;
            }
            Err(Rejection::Malformed(why)) => log::warn!("skipping record: {why}"),
            Err(_) => {}
        }
        Ok(())
    };

    for input in inputs {
        let path = input.as_ref();
        let (format, mut reader) = open_input(path)?;
        log::info!("ingesting {} ({format:?})", path.display());
        match format {
            InputFormat::Jsonl => {
                let mut line = String::new();
                loop {
                    line.clear();
                    let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
                    if n == 0 {
                        break;
                    }
                    if line.trim().is_empty() {
                        continue;
                    }
                    accept(parse_record(RawRecord::Json(line.trim_end())), &mut stats)
                        .map_err(|e| Error::io(&staging_path, e))?;
                }
            }
            InputFormat::Xml => {
                let mut io_result = Ok(());
                parse_medline(reader, |outcome| {
                    if io_result.is_ok() {
                        io_result = accept(outcome, &mut stats);
                    }
                });
                io_result.map_err(|e| Error::io(&staging_path, e))?;
            }
        }
    }
    staging.flush().map_err(|e| Error::io(&staging_path, e))?;
    drop(staging);

    write_sorted_store(&staging_path, offsets, store_dir)?;
    fs::remove_file(&staging_path).map_err(|e| Error::io(&staging_path, e))?;
    log::info!(
        "ingested {} of {} records ({} duplicates)",
        stats.accepted,
        stats.records_seen,
        stats.duplicates
    );
    Ok(stats)
}

fn write_sorted_store(staging_path: &Path, offsets: HashMap<String, u64>, store_dir: &Path) -> Result<()> {
    let mut entries: Vec<(String, u64)> = offsets.into_iter().collect();
    entries.sort_by(|a, b| pmid_cmp(&a.0, &b.0).then_with(|| a.0.cmp(&b.0)));

    let mut staging =
        BufReader::new(File::open(staging_path).map_err(|e| Error::io(staging_path, e))?);
    let corpus_path = store_dir.join(CORPUS_FILE);
    let index_path = store_dir.join(INDEX_FILE);
    let mut corpus = BufWriter::new(File::create(&corpus_path).map_err(|e| Error::io(&corpus_path, e))?);
    let mut index = BufWriter::new(File::create(&index_path).map_err(|e| Error::io(&index_path, e))?);

    let mut offset = 0u64;
    let mut line = String::new();
    for (pmid, staged_at) in entries {
        staging
            .seek(SeekFrom::Start(staged_at))
            .map_err(|e| Error::io(staging_path, e))?;
        line.clear();
        staging
            .read_line(&mut line)
            .map_err(|e| Error::io(staging_path, e))?;
        corpus
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(&corpus_path, e))?;
        writeln!(index, "{pmid}\t{offset}").map_err(|e| Error::io(&index_path, e))?;
        offset += line.len() as u64;
    }
    corpus.flush().map_err(|e| Error::io(&corpus_path, e))?;
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

/// Read-only handle on an ingested store. Safe to share between threads.
#[derive(Debug)]
pub struct CorpusStore {
    dir: PathBuf,
    entries: Vec<(String, u64)>,
    file: Mutex<BufReader<File>>,
}

impl CorpusStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let index_path = dir.join(INDEX_FILE);
        let corpus_path = dir.join(CORPUS_FILE);
        let index = File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(index).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&index_path, e))?;
            if line.is_empty() {
                continue;
            }
            let parsed = line
                .split_once('\t')
                .and_then(|(pmid, off)| Some((pmid.to_string(), off.parse::<u64>().ok()?)));
            match parsed {
                Some(entry) => entries.push(entry),
                None => {
                    return Err(Error::Parse {
                        path: index_path,
                        line: n + 1,
                        message: "expected `pmid<TAB>offset`".into(),
                    })
                }
            }
        }
        if entries
            .windows(2)
            .any(|w| pmid_cmp(&w[0].0, &w[1].0) != Ordering::Less)
        {
            return Err(Error::Validation(format!(
                "{} is not strictly sorted by PMID",
                index_path.display()
            )));
        }
        let file = File::open(&corpus_path).map_err(|e| Error::io(&corpus_path, e))?;
        Ok(Self {
            dir,
            entries,
            file: Mutex::new(BufReader::new(file)),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, pmid: &str) -> bool {
        self.position(pmid).is_some()
    }

    fn position(&self, pmid: &str) -> Option<usize> {
        self.entries
            .binary_search_by(|(p, _)| pmid_cmp(p, pmid).then_with(|| p.as_str().cmp(pmid)))
            .ok()
    }

    /// PMIDs in store order.
    pub fn pmids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(p, _)| p.as_str())
    }

    pub fn get(&self, pmid: &str) -> Result<Document> {
        let pos = self
            .position(pmid)
            .ok_or_else(|| Error::NotFound(pmid.to_string()))?;
        let offset = self.entries[pos].1;
        let corpus_path = self.dir.join(CORPUS_FILE);
        let mut file = self.file.lock().expect("corpus reader poisoned");
        file.seek(SeekFrom::Start(offset))
            .map_err(|e| Error::io(&corpus_path, e))?;
        let mut line = String::new();
        file.read_line(&mut line)
            .map_err(|e| Error::io(&corpus_path, e))?;
        let doc: Document = serde_json::from_str(&line)?;
        if doc.pmid != pmid {
            return Err(Error::Validation(format!(
                "store index points {pmid} at a record for {}",
                doc.pmid
            )));
        }
        Ok(doc)
    }

    /// Streams every document in store order through a separate file handle.
    pub fn iter(&self) -> Result<DocumentIter> {
        let path = self.dir.join(CORPUS_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(DocumentIter {
            path,
            lines: BufReader::new(file),
            line: 0,
        })
    }
}

pub struct DocumentIter {
    path: PathBuf,
    lines: BufReader<File>,
    line: usize,
}

impl Iterator for DocumentIter {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut buf = String::new();
        loop {
            buf.clear();
            self.line += 1;
            match self.lines.read_line(&mut buf) {
                Ok(0) => return None,
                Ok(_) if buf.trim().is_empty() => continue,
                Ok(_) => {
                    return Some(serde_json::from_str(&buf).map_err(|e| Error::Parse {
                        path: self.path.clone(),
                        line: self.line,
                        message: e.to_string(),
                    }))
                }
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            }
        }
    }
}

/// Reads a whole file into memory, transparently un-gzipping `.gz` inputs.
pub fn read_to_string(path: &Path) -> Result<String> {
    let (_, mut reader) = open_input(path)?;
    let mut out = String::new();
    reader
        .read_to_string(&mut out)
        .map_err(|e| Error::io(path, e))?;
    Ok(out)
}
