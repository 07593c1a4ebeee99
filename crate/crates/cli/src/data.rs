//! Corpus, split-directory and bias-token files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use eventshift_core::bias_tokens::BiasTokenSet;
use eventshift_core::corpus::{
    load_corpus, read_split_manifest, remap_labels, write_split, Corpus, CorpusFilter, LabelSpace, TemporalSplit,
};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::CliError;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];
pub const DATASET_FILE: &str = "dataset.json";
pub const SPLIT_MANIFEST_FILE: &str = "split.json";

/// Name, label space and domain order shared by the files of a split directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub label_space: LabelSpace,
    pub domains: Vec<String>,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::Validation(format!("missing input {}", path.display()))
    } else {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

/// Sorted label and domain names appearing in a JSONL corpus.
pub fn scan_names(path: &Path) -> Result<(Vec<String>, Vec<String>), CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut labels = BTreeSet::new();
    let mut domains = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| CliError::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let Some(ls) = v.get("labels").and_then(|l| l.as_array()) {
            labels.extend(ls.iter().filter_map(|l| l.as_str().map(str::to_string)));
        }
        if let Some(d) = v.get("domain").and_then(|d| d.as_str()) {
            domains.insert(d.to_string());
        }
    }
    Ok((labels.into_iter().collect(), domains.into_iter().collect()))
}

/// Loads the corpus named by `path` under the `[data]` settings, merging
/// labels when a merge map is given.
pub fn load_input_corpus(cfg: &Config, path: &Path) -> Result<Corpus, CliError> {
    let data = &cfg.data;
    let (seen_labels, seen_domains) = scan_names(path)?;
    let names = if data.labels.is_empty() {
        seen_labels
            .into_iter()
            .filter(|l| !data.filter.drop_labels.contains(l))
            .collect()
    } else {
        data.labels.clone()
    };
    let space = LabelSpace::new(data.task_kind, names)?;
    let domains = if data.domains.is_empty() {
        seen_domains
    } else {
        data.domains.clone()
    };
    let corpus = load_corpus(path, &space, Some(&domains), &data.filter)?;
    if data.merge.is_empty() {
        Ok(corpus)
    } else {
        Ok(remap_labels(&corpus, &data.merge)?)
    }
}

pub fn write_split_dir(dir: &Path, info: &DatasetInfo, split: &TemporalSplit) -> Result<Vec<PathBuf>, CliError> {
    write_split(dir, split)?;
    let path = dir.join(DATASET_FILE);
    write_json(&path, info)?;
    let mut out: Vec<PathBuf> = SPLITS.iter().map(|s| dir.join(format!("{s}.jsonl"))).collect();
    out.push(dir.join(SPLIT_MANIFEST_FILE));
    out.push(path);
    Ok(out)
}

pub fn read_dataset_info(dir: &Path) -> Result<DatasetInfo, CliError> {
    read_json(&dir.join(DATASET_FILE))
}

/// Loads one split file of a split directory.
pub fn load_split_file(dir: &Path, info: &DatasetInfo, split: &str) -> Result<Corpus, CliError> {
    if !SPLITS.contains(&split) {
        return Err(CliError::Validation(format!("unknown split {split:?} (train, valid or test)")));
    }
    let path = dir.join(format!("{split}.jsonl"));
    if !path.exists() {
        return Err(CliError::Validation(format!("missing input {}", path.display())));
    }
    Ok(load_corpus(
        &path,
        &info.label_space,
        Some(&info.domains),
        &CorpusFilter::default(),
    )?)
}

pub fn load_split_dir(dir: &Path) -> Result<(DatasetInfo, TemporalSplit), CliError> {
    let info = read_dataset_info(dir)?;
    let manifest_path = dir.join(SPLIT_MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(CliError::Validation(format!("missing input {}", manifest_path.display())));
    }
    let manifest = read_split_manifest(&manifest_path)?;
    let split = TemporalSplit {
        train: load_split_file(dir, &info, "train")?,
        valid: load_split_file(dir, &info, "valid")?,
        test: load_split_file(dir, &info, "test")?,
        manifest,
    };
    Ok((info, split))
}

pub fn write_bias_sets(path: &Path, sets: &[BiasTokenSet]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for s in sets {
        serde_json::to_writer(&mut w, s).map_err(|e| CliError::Runtime(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Bias-token sets of all splits in `dir`, keyed by post id.
pub fn read_bias_dir(dir: &Path) -> Result<BTreeMap<String, BiasTokenSet>, CliError> {
    let mut out = BTreeMap::new();
    for split in SPLITS {
        let path = dir.join(format!("{split}.jsonl"));
        let file = File::open(&path).map_err(|e| io_err(&path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let set: BiasTokenSet = serde_json::from_str(&line)
                .map_err(|e| CliError::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
            out.insert(set.post_id.clone(), set);
        }
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}
