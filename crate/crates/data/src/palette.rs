//! Color table mapping label PNG colors to class ids.
//!
//! Text form, one entry per line: `R,G,B -> class_id`. Blank lines and `#`
//! comments are ignored. Class id 255 marks void.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ddnet_core::VOID;

use crate::error::{DataError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<([u8; 3], u8)>,
    lookup: HashMap<[u8; 3], u8>,
}

impl Palette {
    pub fn new(entries: Vec<([u8; 3], u8)>) -> Result<Self> {
        let mut lookup = HashMap::new();
        for (i, &(rgb, id)) in entries.iter().enumerate() {
            if lookup.insert(rgb, id).is_some() {
                return Err(DataError::Palette {
                    line: i + 1,
                    reason: format!("color {rgb:?} listed twice"),
                });
            }
        }
        Ok(Palette { entries, lookup })
    }

    /// Well-separated colors for `num_classes` classes plus white for void.
    pub fn default_for(num_classes: usize) -> Self {
        let mut entries: Vec<([u8; 3], u8)> = (0..num_classes.min(255))
            .map(|c| (class_color(c), c as u8))
            .collect();
        entries.push(([255, 255, 255], VOID));
        Palette::new(entries).expect("generated colors are distinct")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| DataError::Palette { line: i + 1, reason };
            let (rgb, id) = line
                .split_once("->")
                .ok_or_else(|| err(format!("expected `R,G,B -> class_id`, got {line:?}")))?;
            let parts: Vec<&str> = rgb.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(err(format!("expected three color components, got {}", parts.len())));
            }
            let mut color = [0u8; 3];
            for (slot, p) in color.iter_mut().zip(&parts) {
                *slot = p.parse().map_err(|_| err(format!("color component {p:?} is not in 0..=255")))?;
            }
            let id = id.trim();
            let id: u8 = id.parse().map_err(|_| err(format!("class id {id:?} is not in 0..=255")))?;
            entries.push((color, id));
        }
        Palette::new(entries)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(DataError::io(path))?;
        Palette::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ([r, g, b], id) in &self.entries {
            let _ = writeln!(out, "{r},{g},{b} -> {id}");
        }
        out
    }

    pub fn class_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.lookup.get(&rgb).copied()
    }

    /// First color listed for `id`.
    pub fn color_of(&self, id: u8) -> Option<[u8; 3]> {
        self.entries.iter().find(|e| e.1 == id).map(|e| e.0)
    }

    pub fn entries(&self) -> &[([u8; 3], u8)] {
        &self.entries
    }
}

fn class_color(c: usize) -> [u8; 3] {
    const BASE: [[u8; 3]; 8] = [
        [128, 64, 128],
        [220, 20, 60],
        [70, 130, 180],
        [107, 142, 35],
        [250, 170, 30],
        [0, 0, 142],
        [152, 251, 152],
        [102, 102, 156],
    ];
    if c < BASE.len() {
        BASE[c]
    } else {
        // Spread the rest over a 7x7x7 grid; the odd blue keeps clear of white.
        let k = c - BASE.len();
        [(k % 7 * 36) as u8, (k / 7 % 7 * 36) as u8, (k / 49 % 7 * 36) as u8 + 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let p = Palette::default_for(4);
        assert_eq!(Palette::parse(&p.to_text()).unwrap(), p);
        assert_eq!(p.class_of([255, 255, 255]), Some(VOID));
    }

    #[test]
    fn bad_lines_are_positioned() {
        let e = Palette::parse("# header\n1,2,3 -> 0\n1,2 -> 1\n").unwrap_err();
        assert!(matches!(e, DataError::Palette { line: 3, .. }));
        assert!(Palette::parse("1,2,3 -> 0\n1,2,3 -> 1\n").is_err());
        assert!(Palette::parse("1,2,300 -> 0\n").is_err());
    }

    #[test]
    fn many_classes_get_distinct_colors() {
        let p = Palette::default_for(255);
        assert_eq!(p.entries().len(), 256);
    }
}
