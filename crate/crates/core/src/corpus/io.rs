use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::{pretokenize, Corpus, LabelSpace, Post, SplitManifest, TaskKind, TemporalSplit};
use crate::error::{Error, Result};

/// One JSONL line.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    labels: Vec<String>,
    event_id: String,
    domain: String,
    timestamp: String,
}

/// Declarative ingestion filters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusFilter {
    /// Labels removed before validation; posts left without labels are dropped.
    pub drop_labels: Vec<String>,
    pub exclude_events: Vec<String>,
    /// Events with fewer posts (after the other filters) are dropped.
    pub min_posts_per_event: usize,
}

/// Reads a JSONL corpus. With `domains == None` the domain list is the
/// sorted set of domains seen in the file.
pub fn load_corpus(
    path: &Path,
    label_space: &LabelSpace,
    domains: Option<&[String]>,
    filter: &CorpusFilter,
) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let at = |line: usize, message: String| Error::Record {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut posts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| at(lineno, e.to_string()))?;
        if filter.exclude_events.contains(&rec.event_id) {
            continue;
        }
        let mut labels = BTreeSet::new();
        let mut dropped = false;
        for name in &rec.labels {
            if filter.drop_labels.contains(name) {
                dropped = true;
                continue;
            }
            let idx = label_space
                .index_of(name)
                .ok_or_else(|| at(lineno, format!("unknown label {name:?}")))?;
            labels.insert(idx);
        }
        if labels.is_empty() {
            if dropped {
                continue;
            }
            return Err(at(lineno, "field \"labels\" is empty".into()));
        }
        if label_space.task_kind() == TaskKind::MultiClass && labels.len() != 1 {
            return Err(at(
                lineno,
                format!("multi-class record has {} labels", labels.len()),
            ));
        }
        if let Some(known) = domains {
            if !known.contains(&rec.domain) {
                return Err(at(lineno, format!("unknown domain {:?}", rec.domain)));
            }
        }
        let timestamp = DateTime::parse_from_rfc3339(&rec.timestamp)
            .map_err(|e| at(lineno, format!("unparsable timestamp {:?}: {e}", rec.timestamp)))?
            .with_timezone(&Utc);
        let tokens = pretokenize(&rec.text);
        if tokens.is_empty() {
            return Err(at(lineno, "field \"text\" has no tokens".into()));
        }
        posts.push(Post {
            id: rec.id,
            text: rec.text,
            tokens,
            labels: labels.into_iter().collect(),
            event_id: rec.event_id,
            domain: rec.domain,
            timestamp,
        });
    }
    if filter.min_posts_per_event > 0 {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for p in &posts {
            *counts.entry(p.event_id.clone()).or_default() += 1;
        }
        posts.retain(|p| counts[&p.event_id] >= filter.min_posts_per_event);
    }
    let domains = match domains {
        Some(d) => d.to_vec(),
        None => posts
            .iter()
            .map(|p| p.domain.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    Corpus::new(posts, label_space.clone(), domains)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let names = corpus.label_space().names();
    for p in corpus.posts() {
        let rec = Record {
            id: p.id.clone(),
            text: p.text.clone(),
            labels: p.labels.iter().map(|&l| names[l].clone()).collect(),
            event_id: p.event_id.clone(),
            domain: p.domain.clone(),
            timestamp: p.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `split.json`.
pub fn write_split(dir: &Path, split: &TemporalSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_corpus(&dir.join("train.jsonl"), &split.train)?;
    write_corpus(&dir.join("valid.jsonl"), &split.valid)?;
    write_corpus(&dir.join("test.jsonl"), &split.test)?;
    let manifest = serde_json::to_string_pretty(&split.manifest)?;
    let path = dir.join("split.json");
    fs::write(&path, manifest + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_split_manifest(path: &Path) -> Result<SplitManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
