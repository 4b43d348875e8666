//! Deterministic synthetic image-report corpus.
//!
//! Each image shows one lesion with three attributes: a shape, an intensity
//! and a quadrant. The findings text lists all three. The impression names
//! only a class, and the class is a function of the (shape, intensity) pair:
//!
//! ```text
//! class = (shape * n_intensities + intensity) mod n_classes
//! ```
//!
//! so the impression is a higher-level summary that cannot be read off any
//! single findings word.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{normalize_words, Vocabulary};
use super::{ImageReportTriple, ManifestRecord, View};
use crate::error::{Error, Result};

const SHAPES: [&str; 6] = ["circle", "square", "triangle", "cross", "ring", "diamond"];
const INTENSITIES: [&str; 3] = ["faint", "bright", "dense"];
const INTENSITY_LEVELS: [f32; 3] = [0.45, 0.9, 0.68];
const VERTICAL: [&str; 2] = ["upper", "lower"];
const HORIZONTAL: [&str; 2] = ["left", "right"];
const CLASS_WORDS: [&str; 12] = [
    "pneumonia",
    "edema",
    "effusion",
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "nodule",
    "pneumothorax",
    "fibrosis",
    "emphysema",
    "granuloma",
    "hernia",
];

/// Impression phrasings; `{}` is the class word. Also the default positive
/// zero-shot prompt ensemble.
pub const IMPRESSION_TEMPLATES: [&str; 4] = [
    "findings suggesting {}",
    "consistent with {}",
    "appearance compatible with {}",
    "likely {}",
];

/// Default negative prompt ensemble for binary tasks.
pub const NEGATIVE_TEMPLATES: [&str; 4] = [
    "no evidence of {}",
    "without {}",
    "{} is absent",
    "negative for {}",
];

const FINDINGS_TEMPLATE: &str = "{intensity} {shape} in the {vertical} {horizontal} zone. remaining lung fields are clear";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub n_shapes: usize,
    pub n_intensities: usize,
    /// Half-width of the uniform background noise.
    pub noise: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_samples: 100,
            n_classes: 4,
            image_size: 64,
            channels: 1,
            n_shapes: 4,
            n_intensities: 2,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: usize,
    pub intensity: usize,
    /// 0 upper-left, 1 upper-right, 2 lower-left, 3 lower-right.
    pub quadrant: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VqaKind {
    Shape,
    Location,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VqaPair {
    pub question: String,
    pub answer: usize,
}

/// The attribute grammar shared by generation, parsing and VQA.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGrammar {
    pub n_classes: usize,
    pub n_shapes: usize,
    pub n_intensities: usize,
}

impl SyntheticGrammar {
    pub fn new(n_classes: usize, n_shapes: usize, n_intensities: usize) -> Result<Self> {
        if n_shapes == 0 || n_shapes > SHAPES.len() {
            return Err(Error::Config(format!(
                "n_shapes must be in 1..={}, got {n_shapes}",
                SHAPES.len()
            )));
        }
        if n_intensities == 0 || n_intensities > INTENSITIES.len() {
            return Err(Error::Config(format!(
                "n_intensities must be in 1..={}, got {n_intensities}",
                INTENSITIES.len()
            )));
        }
        let capacity = (n_shapes * n_intensities).min(CLASS_WORDS.len());
        if n_classes == 0 || n_classes > capacity {
            return Err(Error::Config(format!(
                "n_classes={n_classes} exceeds grammar capacity {capacity} \
                 ({n_shapes} shapes x {n_intensities} intensities)"
            )));
        }
        Ok(Self {
            n_classes,
            n_shapes,
            n_intensities,
        })
    }

    pub fn from_spec(spec: &SyntheticSpec) -> Result<Self> {
        Self::new(spec.n_classes, spec.n_shapes, spec.n_intensities)
    }

    pub fn class_of(&self, shape: usize, intensity: usize) -> usize {
        (shape * self.n_intensities + intensity) % self.n_classes
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_WORDS[..self.n_classes].iter().map(|s| s.to_string()).collect()
    }

    pub fn findings(&self, a: &Attributes) -> String {
        FINDINGS_TEMPLATE
            .replace("{intensity}", INTENSITIES[a.intensity])
            .replace("{shape}", SHAPES[a.shape])
            .replace("{vertical}", VERTICAL[a.quadrant / 2])
            .replace("{horizontal}", HORIZONTAL[a.quadrant % 2])
    }

    pub fn impression(&self, class: usize, template: usize) -> String {
        IMPRESSION_TEMPLATES[template].replace("{}", CLASS_WORDS[class])
    }

    /// Recovers the attributes from findings text, if it follows the grammar.
    pub fn parse_findings(&self, findings: &str) -> Option<Attributes> {
        let words = normalize_words(findings);
        let find = |table: &[&str]| words.iter().find_map(|w| table.iter().position(|t| t == w));
        let shape = find(&SHAPES[..self.n_shapes])?;
        let intensity = find(&INTENSITIES[..self.n_intensities])?;
        let v = find(&VERTICAL)?;
        let h = find(&HORIZONTAL)?;
        Some(Attributes {
            shape,
            intensity,
            quadrant: v * 2 + h,
        })
    }

    /// The class implied by a findings text under the grammar rule.
    pub fn class_from_findings(&self, findings: &str) -> Option<usize> {
        self.parse_findings(findings)
            .map(|a| self.class_of(a.shape, a.intensity))
    }

    /// The class named by an impression text.
    pub fn class_from_impression(&self, impression: &str) -> Option<usize> {
        normalize_words(impression)
            .iter()
            .find_map(|w| CLASS_WORDS[..self.n_classes].iter().position(|c| c == w))
    }

    pub fn answers(&self, kind: VqaKind) -> Vec<String> {
        match kind {
            VqaKind::Shape => SHAPES[..self.n_shapes].iter().map(|s| s.to_string()).collect(),
            VqaKind::Location => VERTICAL
                .iter()
                .flat_map(|v| HORIZONTAL.iter().map(move |h| format!("{v} {h}")))
                .collect(),
        }
    }

    pub fn vqa(&self, a: &Attributes, kind: VqaKind) -> VqaPair {
        match kind {
            VqaKind::Shape => VqaPair {
                question: "what shape is present".into(),
                answer: a.shape,
            },
            VqaKind::Location => VqaPair {
                question: "where is the lesion located".into(),
                answer: a.quadrant,
            },
        }
    }

    /// Every word the grammar can emit, including prompts and questions.
    pub fn vocabulary(&self) -> Vocabulary {
        let findings = ["{intensity}", "{shape}", "{vertical}", "{horizontal}"]
            .iter()
            .fold(FINDINGS_TEMPLATE.to_string(), |t, p| t.replace(p, " "));
        let templates = IMPRESSION_TEMPLATES
            .iter()
            .chain(NEGATIVE_TEMPLATES.iter())
            .map(|t| t.replace("{}", " "));
        let texts: Vec<String> = SHAPES
            .iter()
            .chain(INTENSITIES.iter())
            .chain(VERTICAL.iter())
            .chain(HORIZONTAL.iter())
            .chain(CLASS_WORDS.iter())
            .map(|s| s.to_string())
            .chain(std::iter::once(findings))
            .chain(templates)
            .chain(["what shape is present".into(), "where is the lesion located".into()])
            .collect();
        Vocabulary::build(texts.iter().map(String::as_str))
    }
}

/// Output of [`generate_synthetic`].
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub grammar: SyntheticGrammar,
    pub vocab: Vocabulary,
    pub triples: Vec<ImageReportTriple>,
    pub labels: Vec<usize>,
    pub attributes: Vec<Attributes>,
    pub records: Vec<ManifestRecord>,
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs().max(dy.abs()) <= 0.85 * r,
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        3 => {
            (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
        }
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.36 * r * r
        }
        _ => dx.abs() + dy.abs() <= r,
    }
}

fn render(spec: &SyntheticSpec, a: &Attributes, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = spec.image_size as f32;
    let half = s / 2.0;
    let r = s * rng.random_range(0.09f32..0.13);
    let jitter = s / 16.0;
    let cy = (a.quadrant / 2) as f32 * half + half / 2.0 + rng.random_range(-jitter..=jitter);
    let cx = (a.quadrant % 2) as f32 * half + half / 2.0 + rng.random_range(-jitter..=jitter);
    let level = INTENSITY_LEVELS[a.intensity];
    let n = spec.image_size;
    let mut plane = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let base = 0.08 + 0.1 * fy / s;
            let noise = if spec.noise > 0.0 {
                rng.random_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            let v = if inside(a.shape, fx - cx, fy - cy, r) {
                level
            } else {
                base
            };
            // Quantize so the corpus survives an 8-bit image round trip.
            plane.push(((v + noise).clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }
    (0..spec.channels).flat_map(|_| plane.iter().copied()).collect()
}

/// Generates `spec.n_samples` samples. Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let grammar = SyntheticGrammar::from_spec(spec)?;
    if spec.image_size < 16 || spec.channels == 0 {
        return Err(Error::Config(format!(
            "synthetic images need size >= 16 and >= 1 channel (got {} x {})",
            spec.image_size, spec.channels
        )));
    }
    let vocab = grammar.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let combos = spec.n_shapes * spec.n_intensities;
    let mut corpus = SyntheticCorpus {
        spec: spec.clone(),
        grammar: grammar.clone(),
        vocab,
        triples: Vec::with_capacity(spec.n_samples),
        labels: Vec::with_capacity(spec.n_samples),
        attributes: Vec::with_capacity(spec.n_samples),
        records: Vec::with_capacity(spec.n_samples),
    };
    for i in 0..spec.n_samples {
        let class = rng.random_range(0..spec.n_classes);
        let options: Vec<usize> = (0..combos).filter(|c| c % spec.n_classes == class).collect();
        let combo = options[rng.random_range(0..options.len())];
        let attrs = Attributes {
            shape: combo / spec.n_intensities,
            intensity: combo % spec.n_intensities,
            quadrant: rng.random_range(0..4),
        };
        debug_assert_eq!(grammar.class_of(attrs.shape, attrs.intensity), class);
        let template = rng.random_range(0..IMPRESSION_TEMPLATES.len());
        let findings = grammar.findings(&attrs);
        let impression = grammar.impression(class, template);
        let image = render(spec, &attrs, &mut rng);
        corpus.triples.push(ImageReportTriple {
            image,
            channels: spec.channels,
            size: spec.image_size,
            impression_tokens: corpus.vocab.tokenize(&impression),
            findings_tokens: corpus.vocab.tokenize(&findings),
        });
        corpus.records.push(ManifestRecord {
            image_path: format!("images/{i:06}.png"),
            findings,
            impression,
            view: View::Frontal,
            labels: Some(vec![CLASS_WORDS[class].to_string()]),
        });
        corpus.labels.push(class);
        corpus.attributes.push(attrs);
    }
    Ok(corpus)
}

impl SyntheticCorpus {
    pub fn into_dataset(self) -> super::Dataset {
        super::Dataset {
            labels: self.labels.iter().map(|&l| Some(l)).collect(),
            samples: self.triples,
            class_names: self.grammar.class_names(),
            records: self.records,
            vocab: self.vocab,
        }
    }

    /// Writes manifest, vocabulary, class list and PNG images under `dir`, in
    /// the same layout [`super::Dataset::from_dir`] reads.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (t, r) in self.triples.iter().zip(&self.records) {
            super::save_image(&dir.join(&r.image_path), &t.image, t.size)?;
        }
        super::write_manifest(&dir.join(super::MANIFEST_FILE), &self.records)?;
        self.vocab.save(&dir.join(super::VOCAB_FILE))?;
        let classes = self.grammar.class_names().join("\n") + "\n";
        let p = dir.join(super::CLASSES_FILE);
        std::fs::write(&p, classes).map_err(|e| Error::io(&p, e))?;
        let spec = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        let p = dir.join("synthetic_spec.json");
        std::fs::write(&p, spec + "\n").map_err(|e| Error::io(&p, e))
    }
}
