//! Per-sentence patch-similarity grids and their export.

use std::path::Path;

use crate::error::{MamaError, Result};
use crate::image::{write_pgm, GrayImage};
use crate::losses::CorrespondenceMatrix;
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapNormalization {
    Raw,
    UnitInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    Csv,
    Pgm,
}

impl MapFormat {
    pub fn parse(s: &str) -> Option<MapFormat> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Some(MapFormat::Csv),
            "pgm" => Some(MapFormat::Pgm),
            _ => None,
        }
    }
}

/// One sentence's similarity over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub grid: Mat,
    pub sentence_index: usize,
    pub sentence_text: String,
    pub normalization: MapNormalization,
}

impl SimilarityMap {
    pub fn argmax_cell(&self) -> (usize, usize) {
        let mut best = (0usize, 0usize);
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..self.grid.rows() {
            for c in 0..self.grid.cols() {
                if self.grid.at(r, c) > best_v {
                    best_v = self.grid.at(r, c);
                    best = (r, c);
                }
            }
        }
        best
    }
}

/// Reshape one correspondence row into the patch grid, row-major.
pub fn sentence_map(
    c: &CorrespondenceMatrix,
    sentence_index: usize,
    patch_grid: (usize, usize),
    sentence_text: &str,
) -> Result<SimilarityMap> {
    let (rows, cols) = patch_grid;
    if sentence_index >= c.values.rows() {
        return Err(MamaError::Input(format!(
            "sentence index {sentence_index} outside {} sentences",
            c.values.rows()
        )));
    }
    if !c.sentence_mask[sentence_index] {
        return Err(MamaError::Input(format!(
            "sentence {sentence_index} is masked"
        )));
    }
    if rows * cols != c.values.cols() {
        return Err(MamaError::Shape(format!(
            "grid {rows}x{cols} vs {} patches",
            c.values.cols()
        )));
    }
    let grid = Mat::from_vec(rows, cols, c.values.row(sentence_index).to_vec());
    Ok(SimilarityMap {
        grid,
        sentence_index,
        sentence_text: sentence_text.to_string(),
        normalization: MapNormalization::Raw,
    })
}

/// (x - min) / (max - min); constant maps become all 0.5.
pub fn normalize_unit(map: &SimilarityMap) -> SimilarityMap {
    let min = map
        .grid
        .data()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let max = map
        .grid
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let grid = if max > min {
        Mat::from_vec(
            map.grid.rows(),
            map.grid.cols(),
            map.grid
                .data()
                .iter()
                .map(|v| (v - min) / (max - min))
                .collect(),
        )
    } else {
        Mat::from_vec(map.grid.rows(), map.grid.cols(), vec![0.5; map.grid.len()])
    };
    SimilarityMap {
        grid,
        sentence_index: map.sentence_index,
        sentence_text: map.sentence_text.clone(),
        normalization: MapNormalization::UnitInterval,
    }
}

/// Write the grid as CSV (row-major reals) or 8-bit PGM (round(255 x)).
pub fn export_map(map: &SimilarityMap, path: &Path, format: MapFormat) -> Result<()> {
    match format {
        MapFormat::Csv => {
            let mut out = String::new();
            for r in 0..map.grid.rows() {
                let cells: Vec<String> = map.grid.row(r).iter().map(|v| format!("{v}")).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            std::fs::write(path, out).map_err(|e| MamaError::io(path.display().to_string(), e))
        }
        MapFormat::Pgm => {
            if map.normalization != MapNormalization::UnitInterval {
                return Err(MamaError::Input(
                    "PGM export requires a unit-interval map".into(),
                ));
            }
            let mut img = GrayImage::new(map.grid.cols(), map.grid.rows());
            for r in 0..map.grid.rows() {
                for c in 0..map.grid.cols() {
                    img.set(r, c, map.grid.at(r, c));
                }
            }
            write_pgm(&img, path)
        }
    }
}
