//! Color-name lookup: quantized RGB to the probabilities of eleven basic
//! color terms.
//!
//! Table layout: 32x32x32 bins of 8 intensity levels, row index
//! `(r >> 3) * 1024 + (g >> 3) * 32 + (b >> 3)`, eleven probabilities per
//! row in [`NAMES`] order. The file format is text: a header line
//! `# otr-colornames v1 sha256=<hex>` followed by 32768 rows of eleven
//! whitespace-separated floats. The digest covers every byte after the
//! header line.

use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use image::RgbImage;
use sha2::{Digest, Sha256};

use super::{FeatureStack, WindowGeometry};
use crate::error::{OtrError, Result};
use crate::grid::Grid;

pub const COLOR_NAMES: usize = 11;
pub const TABLE_ROWS: usize = 32 * 32 * 32;
pub const NAMES: [&str; COLOR_NAMES] = [
    "black", "blue", "brown", "grey", "green", "orange", "pink", "purple", "red", "white", "yellow",
];
const HEADER_PREFIX: &str = "# otr-colornames v1 sha256=";

/// Representative sRGB value of each color term, used to build the bundled
/// table.
const PROTOTYPES: [[f64; 3]; COLOR_NAMES] = [
    [0.0, 0.0, 0.0],
    [30.0, 60.0, 220.0],
    [130.0, 80.0, 40.0],
    [128.0, 128.0, 128.0],
    [40.0, 170.0, 50.0],
    [255.0, 140.0, 0.0],
    [250.0, 160.0, 200.0],
    [130.0, 40.0, 160.0],
    [225.0, 25.0, 30.0],
    [255.0, 255.0, 255.0],
    [250.0, 230.0, 40.0],
];
const PROTOTYPE_SPREAD: f64 = 45.0;
/// Weight of the chroma (max - min channel) coordinate in the prototype
/// distance; keeps dark and light grays away from chromatic terms.
const CHROMA_WEIGHT: f64 = 1.5;

fn chroma(c: &[f64; 3]) -> f64 {
    c.iter().cloned().fold(f64::MIN, f64::max) - c.iter().cloned().fold(f64::MAX, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorNameTable {
    probs: Vec<[f64; COLOR_NAMES]>,
}

impl ColorNameTable {
    /// Soft assignment of each bin center to the color-term prototypes.
    fn from_prototypes() -> Self {
        let mut probs = Vec::with_capacity(TABLE_ROWS);
        for idx in 0..TABLE_ROWS {
            let c = [
                ((idx >> 10) * 8 + 4) as f64,
                (((idx >> 5) & 31) * 8 + 4) as f64,
                ((idx & 31) * 8 + 4) as f64,
            ];
            let mut row = [0.0; COLOR_NAMES];
            for (p, proto) in row.iter_mut().zip(PROTOTYPES.iter()) {
                let d2: f64 = (0..3).map(|k| (c[k] - proto[k]).powi(2)).sum::<f64>()
                    + (CHROMA_WEIGHT * (chroma(&c) - chroma(proto))).powi(2);
                *p = -d2 / (2.0 * PROTOTYPE_SPREAD * PROTOTYPE_SPREAD);
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            probs.push(row);
        }
        ColorNameTable { probs }
    }

    /// Bundled table, built once per process.
    pub fn builtin() -> Arc<ColorNameTable> {
        static TABLE: OnceLock<Arc<ColorNameTable>> = OnceLock::new();
        TABLE.get_or_init(|| Arc::new(Self::from_prototypes())).clone()
    }

    #[inline]
    pub fn index(rgb: [u8; 3]) -> usize {
        ((rgb[0] as usize >> 3) << 10) | ((rgb[1] as usize >> 3) << 5) | (rgb[2] as usize >> 3)
    }

    #[inline]
    pub fn lookup(&self, rgb: [u8; 3]) -> &[f64; COLOR_NAMES] {
        &self.probs[Self::index(rgb)]
    }

    fn payload(&self) -> String {
        let mut s = String::with_capacity(TABLE_ROWS * 11 * 12);
        for row in &self.probs {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = self.payload();
        let digest = hex::encode(Sha256::digest(payload.as_bytes()));
        fs::write(path, format!("{HEADER_PREFIX}{digest}\n{payload}"))
            .map_err(|e| OtrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OtrError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (header, payload) = text
            .split_once('\n')
            .ok_or_else(|| OtrError::ColorTable("missing header".into()))?;
        let expected = header
            .strip_prefix(HEADER_PREFIX)
            .ok_or_else(|| OtrError::ColorTable(format!("bad header '{header}'")))?
            .trim();
        let actual = hex::encode(Sha256::digest(payload.as_bytes()));
        if !expected.eq_ignore_ascii_case(&actual) {
            return Err(OtrError::ColorTable(format!(
                "checksum mismatch: header {expected}, content {actual}"
            )));
        }
        let mut probs = Vec::with_capacity(TABLE_ROWS);
        for (n, line) in payload.lines().enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| OtrError::ColorTable(format!("row {n}: {e}")))?;
            if vals.len() != COLOR_NAMES {
                return Err(OtrError::ColorTable(format!(
                    "row {n} has {} values",
                    vals.len()
                )));
            }
            let sum: f64 = vals.iter().sum();
            if vals.iter().any(|v| *v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return Err(OtrError::ColorTable(format!(
                    "row {n} is not a distribution (sum {sum})"
                )));
            }
            let mut row = [0.0; COLOR_NAMES];
            row.copy_from_slice(&vals);
            probs.push(row);
        }
        if probs.len() != TABLE_ROWS {
            return Err(OtrError::ColorTable(format!(
                "{} rows, expected {TABLE_ROWS}",
                probs.len()
            )));
        }
        Ok(ColorNameTable { probs })
    }
}

/// Per-pixel lookup averaged over each cell. The last table column is
/// dropped: the eleven probabilities sum to one, so it carries no extra
/// information.
pub fn extract_colornames(patch: &RgbImage, table: &ColorNameTable, cell: usize) -> Result<FeatureStack> {
    let (w, h) = (patch.width() as usize, patch.height() as usize);
    if cell == 0 || w < cell || h < cell {
        return Err(OtrError::PatchTooSmall(format!("{w}x{h} with cell size {cell}")));
    }
    let (cw, ch) = (w / cell, h / cell);
    let mut channels = vec![Grid::zeros(cw, ch); COLOR_NAMES - 1];
    let norm = 1.0 / (cell * cell) as f64;
    for cy in 0..ch {
        for cx in 0..cw {
            let mut acc = [0.0; COLOR_NAMES];
            for y in cy * cell..(cy + 1) * cell {
                for x in cx * cell..(cx + 1) * cell {
                    let p = table.lookup(patch.get_pixel(x as u32, y as u32).0);
                    for (a, v) in acc.iter_mut().zip(p) {
                        *a += v;
                    }
                }
            }
            for (k, ch) in channels.iter_mut().enumerate() {
                ch.set(cx, cy, acc[k] * norm);
            }
        }
    }
    FeatureStack::new(channels, cell, WindowGeometry::for_patch(w, h, cell))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn name_index(name: &str) -> usize {
        NAMES.iter().position(|n| *n == name).unwrap()
    }

    #[test]
    fn rows_are_distributions() {
        let t = ColorNameTable::builtin();
        for row in &t.probs {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn saturated_red_is_red() {
        let t = ColorNameTable::builtin();
        let row = t.lookup([255, 0, 0]);
        // Oracle: argmax of the single-pixel lookup.
        let arg = (0..COLOR_NAMES)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .unwrap();
        assert_eq!(arg, name_index("red"));

        let patch = RgbImage::from_pixel(8, 8, Rgb([255, 0, 0]));
        let s = extract_colornames(&patch, &t, 4).unwrap();
        assert_eq!(s.num_channels(), 10);
        let red = s.channels[name_index("red")].get(0, 0);
        for (k, c) in s.channels.iter().enumerate() {
            if k != name_index("red") {
                assert!(c.get(0, 0) < red);
            }
        }
    }

    #[test]
    fn achromatic_pixels_favor_achromatic_terms() {
        let t = ColorNameTable::builtin();
        let chromatic = ["blue", "brown", "green", "orange", "pink", "purple", "red", "yellow"];
        for v in [0u8, 40, 90, 128, 170, 220, 255] {
            let row = t.lookup([v, v, v]);
            let achromatic = row[name_index("black")] + row[name_index("grey")] + row[name_index("white")];
            assert!(achromatic > 0.8, "gray {v}: {achromatic}");
            for c in chromatic {
                assert!(row[name_index(c)] < 0.1, "gray {v} {c}: {}", row[name_index(c)]);
            }
        }
    }

    #[test]
    fn save_load_round_trip_and_checksum() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cn.txt");
        let t = ColorNameTable::builtin();
        t.save(&path).unwrap();
        let back = ColorNameTable::load(&path).unwrap();
        assert_eq!(&back, t.as_ref());

        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("e-1", "e-2", 1);
        assert!(matches!(
            ColorNameTable::parse(&tampered),
            Err(OtrError::ColorTable(_))
        ));
        assert!(ColorNameTable::load(&tmp.path().join("missing.txt")).is_err());
    }
}
