//! Dataset ingestion: manifests, tokenization, the synthetic radiograph-like
//! corpus, and padded batching.

mod batch;
pub mod synth;
pub mod vocab;

pub use batch::{batch, pad_sequences, stack_images, token_tensors, Batch, BatchOrder};
pub use synth::{
    generate_synthetic, Attributes, SyntheticCorpus, SyntheticGrammar, SyntheticSpec, VqaKind,
    VqaPair,
};
pub use vocab::{Vocabulary, BOS, CLS, EOS, PAD, UNK};

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Frontal,
    Lateral,
}

/// One line of a manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: String,
    pub findings: String,
    pub impression: String,
    pub view: View,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl ManifestRecord {
    /// Frontal view with both report sections present.
    pub fn is_usable(&self) -> bool {
        self.view == View::Frontal
            && !self.findings.trim().is_empty()
            && !self.impression.trim().is_empty()
    }
}

/// Drops lateral views and records with an empty findings or impression
/// section, preserving order.
pub fn filter_records(records: Vec<ManifestRecord>) -> Vec<ManifestRecord> {
    records.into_iter().filter(ManifestRecord::is_usable).collect()
}

/// Reads a JSON-lines manifest and applies [`filter_records`]. Blank lines are
/// skipped. Image paths are not checked here; a missing image surfaces when
/// that sample is loaded.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(filter_records(records))
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).expect("manifest records serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// A tokenized image-report sample. `image` is `[channels, size, size]`
/// row-major with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageReportTriple {
    pub image: Vec<f32>,
    pub channels: usize,
    pub size: usize,
    pub impression_tokens: Vec<u32>,
    pub findings_tokens: Vec<u32>,
}

impl ImageReportTriple {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.image.len() != self.channels * self.size * self.size {
            return Err(Error::Shape(format!(
                "image has {} values, expected {}x{}x{}",
                self.image.len(),
                self.channels,
                self.size,
                self.size
            )));
        }
        for seq in [&self.impression_tokens, &self.findings_tokens] {
            if seq.len() < 2 {
                return Err(Error::Shape("token sequence shorter than its markers".into()));
            }
            if let Some(bad) = seq.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
            }
        }
        Ok(())
    }
}

/// Loads an 8-bit image file as `[channels, size, size]` floats in `[0, 1]`.
pub fn load_image(path: &Path, channels: usize, size: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!(
                "image is {}x{}, expected {size}x{size}",
                img.width(),
                img.height()
            ),
        });
    }
    let gray = img.to_luma8();
    let plane: Vec<f32> = gray.as_raw().iter().map(|&p| p as f32 / 255.0).collect();
    Ok((0..channels).flat_map(|_| plane.iter().copied()).collect())
}

/// Writes the first channel of a `[channels, size, size]` image as 8-bit PNG.
pub fn save_image(path: &Path, pixels: &[f32], size: usize) -> Result<()> {
    let bytes: Vec<u8> = pixels[..size * size]
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(size as u32, size as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// An in-memory corpus ready for batching.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<ImageReportTriple>,
    /// Class index per sample, when labels are known.
    pub labels: Vec<Option<usize>>,
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
    pub vocab: Vocabulary,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CLASSES_FILE: &str = "classes.txt";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Tokenizes records and loads their images. Image paths are resolved
    /// against `root`.
    pub fn from_records(
        root: &Path,
        records: Vec<ManifestRecord>,
        vocab: Vocabulary,
        class_names: Vec<String>,
        channels: usize,
        size: usize,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for r in &records {
            let path: PathBuf = root.join(&r.image_path);
            samples.push(ImageReportTriple {
                image: load_image(&path, channels, size)?,
                channels,
                size,
                impression_tokens: vocab.tokenize(&r.impression),
                findings_tokens: vocab.tokenize(&r.findings),
            });
            labels.push(
                r.labels
                    .as_ref()
                    .and_then(|ls| ls.first())
                    .and_then(|l| class_names.iter().position(|c| c == l)),
            );
        }
        Ok(Self {
            samples,
            labels,
            class_names,
            records,
            vocab,
        })
    }

    /// Loads `manifest.jsonl` from a directory, with `vocab.txt` and
    /// `classes.txt` when present (otherwise built from the records).
    pub fn from_dir(dir: &Path, channels: usize, size: usize) -> Result<Self> {
        let records = load_manifest(&dir.join(MANIFEST_FILE))?;
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab = if vocab_path.exists() {
            Vocabulary::load(&vocab_path)?
        } else {
            Vocabulary::build(
                records
                    .iter()
                    .flat_map(|r| [r.findings.as_str(), r.impression.as_str()]),
            )
        };
        let class_names = if dir.join(CLASSES_FILE).exists() {
            Self::class_names_in(dir)?
        } else {
            let mut names: Vec<String> = records
                .iter()
                .filter_map(|r| r.labels.as_ref().and_then(|l| l.first().cloned()))
                .collect();
            names.sort();
            names.dedup();
            names
        };
        Self::from_records(dir, records, vocab, class_names, channels, size)
    }

    /// Class names listed one per line in the directory's `classes.txt`.
    pub fn class_names_in(dir: &Path) -> Result<Vec<String>> {
        let path = dir.join(CLASSES_FILE);
        Ok(std::fs::read_to_string(&path)
            .map_err(|e| Error::io(&path, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect())
    }

    /// Deterministic split: a seeded permutation, first `train_fraction`
    /// to the first half.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((self.len() as f64) * train_fraction).round() as usize;
        let (a, b) = idx.split_at(n_train.min(self.len()));
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        (self.subset(&a), self.subset(&b))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            class_names: self.class_names.clone(),
            vocab: self.vocab.clone(),
        }
    }
}
