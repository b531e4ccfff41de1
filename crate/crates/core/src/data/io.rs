use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::generator::{GeneratedDataset, Manifest};
use super::ppm::read_frame;
use super::types::{BoxCoords, FrameSample, Label, Split, TextBox, MAX_BOXES};
use super::vocab::{tokenize, SynonymTable, Vocab};
use crate::error::{Error, Result};
use crate::exec::{try_map_indexed, Execution};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub vocab: Vocab,
    pub synonyms: SynonymTable,
    pub samples: Vec<FrameSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&FrameSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn max_tokens(&self) -> usize {
        self.manifest.config.max_tokens
    }
}

impl From<GeneratedDataset> for Dataset {
    /// In-memory dataset without a backing directory.
    fn from(g: GeneratedDataset) -> Self {
        Self {
            root: PathBuf::new(),
            manifest: g.manifest,
            vocab: g.vocab,
            synonyms: g.synonyms,
            samples: g.samples,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationIn {
    frame: String,
    #[serde(rename = "box")]
    coords: [f64; 4],
    text: String,
    label: String,
    split: String,
    program_id: u32,
}

struct PendingFrame {
    first_line: usize,
    split: Split,
    program_id: u32,
    boxes: Vec<TextBox>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads a dataset directory written by the generator.
pub fn load_dataset(dir: &Path, exec: Execution) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let words: Vec<String> = read_json(&dir.join("vocab.json"))?;
    let vocab = Vocab::new(words)?;
    let synonyms: SynonymTable = read_json(&dir.join("synonyms.json"))?;
    synonyms.validate()?;
    let cfg = &manifest.config;

    let ann_path = dir.join("annotations.jsonl");
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let load_err = |line: usize, message: String| Error::Load {
        path: ann_path.clone(),
        line,
        message,
    };
    let mut frames: BTreeMap<String, PendingFrame> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: AnnotationIn = serde_json::from_str(raw).map_err(|e| load_err(line, e.to_string()))?;
        let label = Label::parse(&rec.label)
            .ok_or_else(|| load_err(line, format!("unknown label {:?}", rec.label)))?;
        let split = Split::parse(&rec.split)
            .ok_or_else(|| load_err(line, format!("unknown split {:?}", rec.split)))?;
        let coords = BoxCoords::from_array(rec.coords);
        coords.validate().map_err(|e| load_err(line, e.to_string()))?;
        let entry = frames.entry(rec.frame.clone()).or_insert_with(|| PendingFrame {
            first_line: line,
            split,
            program_id: rec.program_id,
            boxes: Vec::new(),
        });
        if entry.split != split || entry.program_id != rec.program_id {
            return Err(load_err(
                line,
                format!("frame {} has inconsistent split or program id", rec.frame),
            ));
        }
        if entry.boxes.len() == MAX_BOXES {
            return Err(load_err(line, format!("frame {} has more than {MAX_BOXES} boxes", rec.frame)));
        }
        entry.boxes.push(TextBox {
            coords,
            tokens: tokenize(&rec.text, &vocab, cfg.max_tokens),
            raw_text: rec.text,
            label,
        });
    }

    let pending: Vec<(String, PendingFrame)> = frames.into_iter().collect();
    let samples = try_map_indexed(exec, &pending, |_, (name, p)| -> Result<FrameSample> {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(Error::Load {
                path: ann_path.clone(),
                line: p.first_line,
                message: format!("missing frame file {}", path.display()),
            });
        }
        let sample = FrameSample {
            frame: read_frame(&path)?,
            boxes: p.boxes.clone(),
            split: p.split,
            program_id: p.program_id,
        };
        sample
            .validate(cfg.frame_height, cfg.frame_width)
            .map_err(|e| Error::Load {
                path: ann_path.clone(),
                line: p.first_line,
                message: e.to_string(),
            })?;
        Ok(sample)
    })?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        vocab,
        synonyms,
        samples,
    })
}
