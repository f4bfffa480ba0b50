//! On-disk corpora: `images/<id>.png` with `labels/<id>.png`.

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DataError, Result};
use crate::palette::Palette;
use crate::pngio;
use crate::sample::Sample;
use crate::synth::{image_path, label_path, IMAGES_DIR, LABELS_DIR, PALETTE_FILE};

#[derive(Debug)]
pub struct Corpus {
    root: PathBuf,
    palette: Palette,
    ids: Vec<String>,
    unknown_pixels: Cell<u64>,
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(DataError::io(dir))? {
        let path = entry.map_err(DataError::io(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Opens a corpus. Every image needs a label and vice versa; an empty or
/// missing `images/` directory gives an empty corpus.
pub fn load_corpus(dir: &Path, palette: Palette) -> Result<Corpus> {
    let ids = png_stems(&dir.join(IMAGES_DIR))?;
    let labels = png_stems(&dir.join(LABELS_DIR))?;
    for id in &ids {
        if labels.binary_search(id).is_err() {
            return Err(DataError::MissingPair {
                id: id.clone(),
                missing: label_path(dir, id),
            });
        }
    }
    for id in &labels {
        if ids.binary_search(id).is_err() {
            return Err(DataError::MissingPair {
                id: id.clone(),
                missing: image_path(dir, id),
            });
        }
    }
    Ok(Corpus {
        root: dir.to_path_buf(),
        palette,
        ids,
        unknown_pixels: Cell::new(0),
    })
}

/// Opens a corpus with the `palette.txt` stored next to it.
pub fn open(dir: &Path) -> Result<Corpus> {
    load_corpus(dir, Palette::read(&dir.join(PALETTE_FILE))?)
}

impl Corpus {
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Ids in lexicographic order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    /// Label pixels so far whose color was not in the palette.
    pub fn unknown_pixels(&self) -> u64 {
        self.unknown_pixels.get()
    }

    pub fn load(&self, id: &str) -> Result<Sample> {
        let rgb = pngio::read_rgb(&image_path(&self.root, id))?;
        let lp = label_path(&self.root, id);
        let (label, unknown) = pngio::read_label(&lp, &self.palette)?;
        if unknown > 0 {
            log::warn!("{}: {unknown} pixels with colors outside the palette set to void", lp.display());
            self.unknown_pixels.set(self.unknown_pixels.get() + unknown);
        }
        if (rgb.height, rgb.width) != (label.height(), label.width()) {
            return Err(DataError::Shape(format!(
                "{id}: image is {}x{} but label is {}x{}",
                rgb.height,
                rgb.width,
                label.height(),
                label.width()
            )));
        }
        Sample::from_rgb8(id, rgb.height, rgb.width, &rgb.data, label)
    }

    /// Samples in lexicographic id order.
    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        self.ids.iter().map(|id| self.load(id))
    }

    /// Samples in an order fixed by `seed`.
    pub fn shuffled(&self, seed: u64) -> impl Iterator<Item = Result<Sample>> + '_ {
        let mut ids: Vec<&String> = self.ids.iter().collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        ids.into_iter().map(|id| self.load(id))
    }

    pub fn load_all(&self, ids: &[String]) -> Result<Vec<Sample>> {
        ids.iter().map(|id| self.load(id)).collect()
    }
}
