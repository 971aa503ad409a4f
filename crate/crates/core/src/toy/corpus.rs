//! Edit-case corpora: generation, on-disk layout, and loading.
//!
//! A corpus directory holds one source image and one ground-truth edit mask
//! per item as PNGs, plus an `index.json` tying them to prompts and scene
//! parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::png;
use crate::rng::rng_from_seed;
use crate::toy::scene::{EditCase, EditKind, SceneSpec, IMAGE_SIZE};

/// Current on-disk index schema.
pub const CORPUS_SCHEMA_VERSION: u32 = 1;

/// One edit task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: usize,
    pub case: EditCase,
}

impl CorpusItem {
    pub fn image_file(&self) -> String {
        format!("img_{:03}.png", self.id)
    }

    pub fn mask_file(&self) -> String {
        format!("mask_{:03}.png", self.id)
    }
}

/// A batch of edit tasks with known ground truth.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

#[derive(Serialize, Deserialize)]
struct CorpusIndex {
    schema_version: u32,
    items: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: usize,
    case: EditCase,
    image: String,
    mask: String,
    source_prompt: String,
    target_prompt: String,
    edited_token_indices: Vec<usize>,
}

impl Corpus {
    /// Generate `size` edit cases, cycling through the three edit kinds so
    /// the corpus stays balanced.
    pub fn generate(size: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let items = (0..size)
            .map(|id| {
                let kind = EditKind::ALL[id % EditKind::ALL.len()];
                let source = SceneSpec::random(&mut rng);
                CorpusItem {
                    id,
                    case: EditCase::random(source, kind, &mut rng),
                }
            })
            .collect();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Write images, masks, and the JSON index into `dir` (created if
    /// missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.items.len());
        for item in &self.items {
            let img: crate::grid::LatentGrid<f32> = item.case.source.render();
            png::save_image(&dir.join(item.image_file()), &img)?;
            png::save_mask(&dir.join(item.mask_file()), &item.case.ground_truth_mask())?;
            entries.push(IndexEntry {
                id: item.id,
                case: item.case,
                image: item.image_file(),
                mask: item.mask_file(),
                source_prompt: item.case.source_prompt(),
                target_prompt: item.case.target_prompt(),
                edited_token_indices: item.case.edited_token_indices(),
            });
        }
        let index = CorpusIndex {
            schema_version: CORPUS_SCHEMA_VERSION,
            items: entries,
        };
        let json = serde_json::to_string_pretty(&index)
            .map_err(|e| Error::invalid(format!("serializing corpus index: {e}")))?;
        fs::write(dir.join("index.json"), json)?;
        Ok(())
    }

    /// Load a corpus directory, checking the schema version and that every
    /// referenced file exists with the expected dimensions.
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let text = fs::read_to_string(&index_path)
            .map_err(|e| Error::invalid(format!("reading {}: {e}", index_path.display())))?;
        let index: CorpusIndex = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("parsing {}: {e}", index_path.display())))?;
        if index.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "corpus schema version {} unsupported (expected {CORPUS_SCHEMA_VERSION})",
                index.schema_version
            )));
        }
        let mut items = Vec::with_capacity(index.items.len());
        for entry in index.items {
            let img: crate::grid::LatentGrid<f32> = png::load_image(&dir.join(&entry.image))?;
            if img.shape() != (IMAGE_SIZE, IMAGE_SIZE, 3) {
                return Err(Error::invalid(format!(
                    "{}: expected {IMAGE_SIZE}x{IMAGE_SIZE} RGB image",
                    entry.image
                )));
            }
            let mask = png::load_mask(&dir.join(&entry.mask))?;
            if mask.dim() != (IMAGE_SIZE, IMAGE_SIZE) {
                return Err(Error::invalid(format!(
                    "{}: expected {IMAGE_SIZE}x{IMAGE_SIZE} mask",
                    entry.mask
                )));
            }
            items.push(CorpusItem {
                id: entry.id,
                case: entry.case,
            });
        }
        Ok(Self { items })
    }
}

/// Random scenes for model training (distinct stream from corpus
/// generation).
pub fn training_scenes(count: usize, seed: u64) -> Vec<SceneSpec> {
    let mut rng = rng_from_seed(seed);
    (0..count).map(|_| SceneSpec::random(&mut rng)).collect()
}

/// Deterministic per-item seed for parallel evaluation.
pub fn item_seed(base: u64, id: usize) -> u64 {
    crate::rng::derive_seed(base, id as u64)
}
