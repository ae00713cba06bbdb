//! Dataset directories, the path cache and the trajectory cache.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kgseq_core::kg::{Token, Triple, Vocabulary};
use kgseq_core::paths::{PaddedPath, HORIZON};
use kgseq_core::trajectory::Trajectory;

use crate::error::{io_err, Error, Result};
use crate::pipeline::Data;
use crate::synth::SynthData;

pub const TRAIN: &str = "train.tsv";
pub const VALID: &str = "valid.tsv";
pub const TEST: &str = "test.tsv";
pub const FEATURES: &str = "features.tsv";

const PATHS_MAGIC: &str = "# kgseq-paths 1";
const TRAJ_MAGIC: &str = "kgseq-trajectories 1";

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads an artifact produced by an earlier command, pointing at that
/// command when it is missing.
pub fn require(path: &Path, step: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::Missing {
            path: path.to_path_buf(),
            step,
        })
    }
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn write_dataset(dir: &Path, data: &SynthData) -> Result<()> {
    write_file(&dir.join(TRAIN), &data.train)?;
    write_file(&dir.join(VALID), &data.valid)?;
    write_file(&dir.join(TEST), &data.test)?;
    write_file(&dir.join(FEATURES), &data.features)
}

/// Loads the three splits and, when present, the feature file.
pub fn load_dataset(dir: &Path, width: usize) -> Result<Data> {
    let read = |name: &str| read_text(&dir.join(name));
    let features = dir.join(FEATURES);
    let features = if features.exists() {
        read_text(&features)?
    } else {
        String::new()
    };
    Data::from_texts(&read(TRAIN)?, &read(VALID)?, &read(TEST)?, &features, width)
}

/// One line per query: `h<TAB>r<TAB>t : tok,tok,...` with all seven slots.
pub fn format_paths(vocab: &Vocabulary, paths: &[(Triple, PaddedPath)]) -> String {
    let mut out = format!("{PATHS_MAGIC}\n");
    for (t, p) in paths {
        let toks: Vec<String> = p.slots.iter().map(|&s| vocab.token_name(s)).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{} : {}",
            vocab.entity_name(t.head),
            vocab.relation_name(t.relation),
            vocab.entity_name(t.tail),
            toks.join(",")
        );
    }
    out
}

pub fn parse_paths(path: &Path, text: &str, vocab: &Vocabulary) -> Result<Vec<(Triple, PaddedPath)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| format_err(path, line_no, m);
        let (query, tokens) = line
            .rsplit_once(" : ")
            .ok_or_else(|| err("expected `h\\tr\\tt : tokens`".into()))?;
        let parts: Vec<&str> = query.split('\t').collect();
        let [h, r, t] = parts[..] else {
            return Err(err(format!("expected 3 tab-separated fields, got {}", parts.len())));
        };
        let triple = Triple::new(
            vocab.entity(h).map_err(|e| err(e.to_string()))?,
            vocab.relation(r).map_err(|e| err(e.to_string()))?,
            vocab.entity(t).map_err(|e| err(e.to_string()))?,
        );
        let toks: Vec<Token> = tokens
            .split(',')
            .map(|n| vocab.token(n).map_err(|e| err(e.to_string())))
            .collect::<Result<_>>()?;
        let slots: [Token; HORIZON] = toks
            .try_into()
            .map_err(|v: Vec<Token>| err(format!("expected {HORIZON} tokens, got {}", v.len())))?;
        let corrective = slots[0] == Token::PAD && slots[1] == Token::NULL;
        out.push((triple, PaddedPath { slots, corrective }));
    }
    Ok(out)
}

/// Trajectory cache header fields.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrajHeader {
    pub widths: (usize, usize, usize),
    pub with_state: bool,
    pub records: usize,
    /// Settings the records were built under.
    pub source: String,
}

/// Text header followed by fixed-width little-endian f64 records.
pub fn encode_trajectories(trajs: &[Trajectory], widths: (usize, usize, usize), source: &str) -> Result<Vec<u8>> {
    let with_state = trajs.first().is_some_and(|t| t.state.is_some());
    if trajs.iter().any(|t| t.state.is_some() != with_state) {
        return Err(Error::Config("trajectories mix fused and state-free records".into()));
    }
    let mut out = format!(
        "{TRAJ_MAGIC}\nhorizon {HORIZON}\nwidths {} {} {}\nstate {}\nrecords {}\nsource {source}\nend\n",
        widths.0,
        widths.1,
        widths.2,
        u8::from(with_state),
        trajs.len()
    )
    .into_bytes();
    for t in trajs {
        for v in t.to_record(widths)? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits `bytes` at the first `end\n` line into header lines and payload.
pub(crate) fn split_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Vec<&'a str>, &'a [u8])> {
    let marker = b"\nend\n";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| format_err(path, 0, "header has no `end` line"))?;
    let head = std::str::from_utf8(&bytes[..pos]).map_err(|_| format_err(path, 0, "header is not UTF-8"))?;
    Ok((head.lines().collect(), &bytes[pos + marker.len()..]))
}

pub(crate) fn f64s(path: &Path, payload: &[u8]) -> Result<Vec<f64>> {
    if !payload.len().is_multiple_of(8) {
        return Err(format_err(path, 0, "payload is not a whole number of f64 values"));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Value of the header line `key ...`.
pub(crate) fn header_field<'a>(path: &Path, lines: &[&'a str], key: &str) -> Result<&'a str> {
    lines
        .iter()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .ok_or_else(|| format_err(path, 0, format!("header lacks `{key}`")))
}

fn parse_num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| format_err(path, 0, format!("bad number `{s}`")))
}

pub fn decode_trajectories(path: &Path, bytes: &[u8]) -> Result<(TrajHeader, Vec<Trajectory>)> {
    let (lines, payload) = split_header(path, bytes)?;
    if lines.first() != Some(&TRAJ_MAGIC) {
        return Err(Error::Version(format!("{} is not a version-1 trajectory cache", path.display())));
    }
    let horizon: usize = parse_num(path, header_field(path, &lines, "horizon")?)?;
    if horizon != HORIZON {
        return Err(Error::Version(format!("trajectory horizon {horizon}, expected {HORIZON}")));
    }
    let w: Vec<usize> = header_field(path, &lines, "widths")?
        .split_whitespace()
        .map(|s| parse_num(path, s))
        .collect::<Result<_>>()?;
    let [a, b, c] = w[..] else {
        return Err(format_err(path, 3, "widths needs three values"));
    };
    let header = TrajHeader {
        widths: (a, b, c),
        with_state: header_field(path, &lines, "state")? == "1",
        records: parse_num(path, header_field(path, &lines, "records")?)?,
        source: header_field(path, &lines, "source")?.to_string(),
    };
    let values = f64s(path, payload)?;
    let width = Trajectory::record_width(header.widths);
    if values.len() != header.records * width {
        return Err(format_err(
            path,
            0,
            format!("{} values for {} records of width {width}", values.len(), header.records),
        ));
    }
    let trajs = values
        .chunks_exact(width)
        .map(|r| Trajectory::from_record(r, header.widths))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((header, trajs))
}
