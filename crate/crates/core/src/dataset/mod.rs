//! Synthetic multi-writer line dataset: generation, persistence, batching.
//!
//! A dataset directory holds `manifest.jsonl` and an `images/` folder of
//! 8-bit grayscale PNGs. The first manifest line is a [`ManifestHeader`]
//! carrying the generation spec; every following line is one [`Record`].

mod batch;
mod glyphs;

pub use batch::{nested_clusters, pad_and_stack, sample_indices, Batch};
pub use glyphs::{canonical_glyphs, Glyph, WriterStyle, LINE_HEIGHT, MIN_ADVANCE_PX};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{Alphabet, CtcError, LabelSequence};
use crate::raster::{Image, RasterError};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_FORMAT: u32 = 1;
/// Lines per target writer: half for testing, half for adaptation.
pub const TARGET_LINES: usize = 512;
pub const TARGET_TEST_LINES: usize = 256;
pub const TARGET_ADAPT_LINES: usize = 256;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("divergence {0} outside [0, 1]")]
    Divergence(f64),

    #[error("characters not in alphabet: {0:?}")]
    UnknownChars(Vec<char>),

    #[error("text line is empty")]
    EmptyText,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Raster(#[from] RasterError),

    #[error(transparent)]
    Alphabet(#[from] CtcError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Adaptation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TextSource {
    /// Seeded random words over the alphabet, `min_chars..=max_chars` per line.
    Random { min_chars: usize, max_chars: usize },
    /// One candidate line per row of a UTF-8 text file.
    Corpus { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub alphabet: String,
    pub base_writers: usize,
    pub base_train_lines: usize,
    /// Held-out lines per base writer, for monitoring base training.
    pub base_test_lines: usize,
    /// Base writer divergences are spread evenly over this range.
    pub base_divergence: (f64, f64),
    pub target_writers: usize,
    pub target_lines: usize,
    pub target_divergence: f64,
    pub text: TextSource,
}

impl DatasetSpec {
    /// 20 base writers with 200 training lines each and 5 divergent targets.
    pub fn desk() -> Self {
        DatasetSpec {
            seed: 1,
            alphabet: Alphabet::latin().as_string(),
            base_writers: 20,
            base_train_lines: 200,
            base_test_lines: 10,
            base_divergence: (0.0, 0.4),
            target_writers: 5,
            target_lines: TARGET_LINES,
            target_divergence: 1.0,
            text: TextSource::Random { min_chars: 4, max_chars: 10 },
        }
    }

    pub fn alphabet(&self) -> Result<Alphabet, DatasetError> {
        Ok(Alphabet::new(self.alphabet.chars())?)
    }

    pub fn writer_roles(&self) -> Vec<WriterInfo> {
        let (lo, hi) = self.base_divergence;
        let base = (0..self.base_writers).map(|i| {
            let f = if self.base_writers > 1 { i as f64 / (self.base_writers - 1) as f64 } else { 0.0 };
            WriterInfo { id: i as u64, divergence: lo + (hi - lo) * f, target: false }
        });
        let targets = (0..self.target_writers).map(|i| WriterInfo {
            id: (self.base_writers + i) as u64,
            divergence: self.target_divergence,
            target: true,
        });
        base.chain(targets).collect()
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.target_writers > 0 && self.target_lines < TARGET_LINES {
            return Err(DatasetError::Protocol(format!(
                "target writers need at least {TARGET_LINES} lines ({TARGET_TEST_LINES} test + {TARGET_ADAPT_LINES} adaptation), spec has {}",
                self.target_lines
            )));
        }
        for d in [self.base_divergence.0, self.base_divergence.1, self.target_divergence] {
            if !(0.0..=1.0).contains(&d) {
                return Err(DatasetError::Divergence(d));
            }
        }
        if let TextSource::Random { min_chars, max_chars } = self.text {
            if min_chars == 0 || max_chars < min_chars {
                return Err(DatasetError::Protocol(format!("bad line length range {min_chars}..={max_chars}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriterInfo {
    pub id: u64,
    pub divergence: f64,
    pub target: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: u32,
    pub spec: DatasetSpec,
    pub writers: Vec<WriterInfo>,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Relative to the manifest's directory.
    pub image: String,
    pub text: String,
    pub writer: u64,
    pub split: Split,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines();
        let header: ManifestHeader =
            serde_json::from_str(lines.next().ok_or_else(|| DatasetError::Manifest("empty manifest".into()))?)?;
        if header.format != MANIFEST_FORMAT {
            return Err(DatasetError::Manifest(format!("format {} unsupported", header.format)));
        }
        let records = lines.filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<Vec<Record>, _>>()?;
        if records.len() != header.records {
            return Err(DatasetError::Manifest(format!("header declares {} records, found {}", header.records, records.len())));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = records.iter().find(|r| !seen.insert(&r.image)) {
            return Err(DatasetError::Manifest(format!("duplicate record {}", dup.image)));
        }
        Ok(Manifest { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

/// Deterministic random phrases over the non-space alphabet symbols.
fn random_text(rng: &mut ChaCha8Rng, symbols: &[char], min_chars: usize, max_chars: usize) -> String {
    let letters: Vec<char> = symbols.iter().copied().filter(|c| c.is_alphabetic()).collect();
    let digits: Vec<char> = symbols.iter().copied().filter(|c| c.is_ascii_digit()).collect();
    let others: Vec<char> = symbols.iter().copied().filter(|c| !c.is_whitespace()).collect();
    let has_space = symbols.contains(&' ');
    let target = rng.gen_range(min_chars..=max_chars);
    let mut s = String::new();
    while s.chars().count() < target {
        if !s.is_empty() && has_space {
            s.push(' ');
        }
        let pool = if !digits.is_empty() && rng.gen_bool(0.1) {
            &digits
        } else if !letters.is_empty() {
            &letters
        } else {
            &others
        };
        let len = rng.gen_range(1..=6);
        for _ in 0..len {
            s.push(*pool.choose(rng).expect("non-empty alphabet"));
        }
    }
    let trimmed: String = s.chars().take(target).collect();
    let t = trimmed.trim_end().to_string();
    if t.is_empty() {
        others[0].to_string()
    } else {
        t
    }
}

fn corpus_lines(path: &Path, alphabet: &Alphabet) -> Result<Vec<String>, DatasetError> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    if lines.is_empty() {
        return Err(DatasetError::Protocol(format!("corpus {} has no lines", path.display())));
    }
    let mut unknown: Vec<char> = lines.iter().flat_map(|l| l.chars()).filter(|&c| !alphabet.contains(c)).collect();
    if !unknown.is_empty() {
        unknown.sort_unstable();
        unknown.dedup();
        return Err(DatasetError::UnknownChars(unknown));
    }
    Ok(lines)
}

struct WriterOutput {
    records: Vec<Record>,
    images: Vec<Image>,
}

fn generate_writer(spec: &DatasetSpec, info: &WriterInfo, symbols: &[char], corpus: Option<&[String]>) -> Result<WriterOutput, DatasetError> {
    let style = WriterStyle::new(spec.seed, info.id, info.divergence, symbols)?;
    let mut text_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5445_5854);
    text_rng.set_stream(info.id);
    let mut render_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x494e_4b);
    render_rng.set_stream(info.id);

    let n = if info.target { spec.target_lines } else { spec.base_train_lines + spec.base_test_lines };
    let splits: Vec<Split> = if info.target {
        // A seeded permutation decides which lines are held out for testing.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut text_rng);
        let mut s = vec![Split::Test; n];
        for &i in &order[TARGET_TEST_LINES..TARGET_TEST_LINES + TARGET_ADAPT_LINES] {
            s[i] = Split::Adaptation;
        }
        s
    } else {
        (0..n).map(|i| if i < spec.base_train_lines { Split::Train } else { Split::Test }).collect()
    };

    let mut out = WriterOutput { records: Vec::with_capacity(n), images: Vec::with_capacity(n) };
    for (i, split) in splits.into_iter().enumerate() {
        let text = match (&spec.text, corpus) {
            (_, Some(lines)) => lines.choose(&mut text_rng).expect("non-empty corpus").clone(),
            (TextSource::Random { min_chars, max_chars }, None) => random_text(&mut text_rng, symbols, *min_chars, *max_chars),
            (TextSource::Corpus { .. }, None) => unreachable!("corpus loaded before generation"),
        };
        let image = style.render_line(&text, &mut render_rng)?;
        out.records.push(Record {
            image: format!("images/w{:03}_{:04}.png", info.id, i),
            text,
            writer: info.id,
            split,
            width: image.width(),
        });
        out.images.push(image);
    }
    Ok(out)
}

/// Renders every writer's lines and writes PNGs plus the manifest under
/// `out_dir`. Rebuilding with the same spec reproduces every byte.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest, DatasetError> {
    spec.validate()?;
    let alphabet = spec.alphabet()?;
    let corpus = match &spec.text {
        TextSource::Corpus { path } => Some(corpus_lines(path, &alphabet)?),
        TextSource::Random { .. } => None,
    };
    let writers = spec.writer_roles();
    fs::create_dir_all(out_dir.join("images"))?;
    let outputs: Vec<WriterOutput> = writers
        .par_iter()
        .map(|w| {
            let out = generate_writer(spec, w, alphabet.symbols(), corpus.as_deref())?;
            for (r, img) in out.records.iter().zip(&out.images) {
                img.save_png(&out_dir.join(&r.image))?;
            }
            Ok(out)
        })
        .collect::<Result<_, DatasetError>>()?;
    let records: Vec<Record> = outputs.into_iter().flat_map(|o| o.records).collect();
    let manifest = Manifest {
        header: ManifestHeader { format: MANIFEST_FORMAT, spec: spec.clone(), writers, records: records.len() },
        records,
    };
    let mut f = fs::File::create(out_dir.join(MANIFEST_FILE))?;
    f.write_all(manifest.to_jsonl().as_bytes())?;
    Ok(manifest)
}

/// A manifest with its images and encoded labels in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub alphabet: Alphabet,
    pub images: Vec<Image>,
    pub labels: Vec<LabelSequence>,
}

impl Dataset {
    /// `path` is a dataset directory or its manifest file.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Manifest::read(&manifest_path)?;
        let alphabet = manifest.header.spec.alphabet()?;
        let images = manifest
            .records
            .par_iter()
            .map(|r| {
                let img = Image::load_png(&root.join(&r.image))?;
                if img.height() != LINE_HEIGHT || img.width() != r.width {
                    return Err(DatasetError::Manifest(format!(
                        "{}: {}x{} image, manifest declares {}x{}",
                        r.image,
                        img.height(),
                        img.width(),
                        LINE_HEIGHT,
                        r.width
                    )));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let labels = manifest.records.iter().map(|r| alphabet.encode(&r.text)).collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset { root, manifest, alphabet, images, labels })
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    /// Record indices matching `split` and, if given, `writer`, in manifest order.
    pub fn indices(&self, split: Split, writer: Option<u64>) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split && writer.map_or(true, |w| r.writer == w))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn target_writers(&self) -> Vec<u64> {
        self.manifest.header.writers.iter().filter(|w| w.target).map(|w| w.id).collect()
    }

    pub fn text(&self, i: usize) -> &str {
        &self.manifest.records[i].text
    }
}
