//! Word-level vocabulary and the synthetic grid-caption task.
//!
//! An image is a `side × side` grid of RGB cells; one cell holds a coloured
//! object and the rest are black. The caption names the colour and the
//! cell: `"red at row 1 col 2"`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const SPECIAL: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
const WORDS: [&str; 6] = ["describe", "the", "image", "at", "row", "col"];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("orange", [1.0, 0.5, 0.0]),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn standard() -> Self {
        let words = SPECIAL
            .iter()
            .chain(&WORDS)
            .copied()
            .chain(COLORS.iter().map(|(c, _)| *c))
            .chain(DIGITS)
            .map(str::to_string)
            .collect();
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_grid_side(&self) -> usize {
        DIGITS.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Config(format!("word `{w}` not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `<bos> describe the image`.
    pub fn prompt(&self) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode("describe the image").expect("built-in words"));
        ids
    }
}

/// Grid of cells, each holding `channels` values, stored row-major as an
/// `(side², channels)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    cells: Tensor,
}

impl Image {
    pub fn new(side: usize, cells: Tensor) -> Result<Self> {
        if cells.ndim() != 2 || cells.shape()[0] != side * side {
            return Err(Error::InvalidShape(format!(
                "image of side {side} needs ({}, channels) cells, got {:?}",
                side * side,
                cells.shape()
            )));
        }
        Ok(Self { side, cells })
    }

    pub fn blank(side: usize, channels: usize) -> Self {
        Self {
            side,
            cells: Tensor::zeros(&[side * side, channels]),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.cells.shape()[1]
    }

    pub fn cells(&self) -> &Tensor {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut Tensor {
        &mut self.cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub color: usize,
    pub row: usize,
    pub col: usize,
    pub caption: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub side: usize,
    pub vocab: Vocab,
    rng: ChaCha8Rng,
}

impl SyntheticTask {
    pub fn new(side: usize, seed: u64) -> Self {
        Self {
            side,
            vocab: Vocab::standard(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn render(&self, color: usize, row: usize, col: usize) -> Image {
        let mut img = Image::blank(self.side, 3);
        let rgb = COLORS[color].1;
        for (c, v) in rgb.iter().enumerate() {
            img.cells.set(&[row * self.side + col, c], *v);
        }
        img
    }

    pub fn caption_text(&self, color: usize, row: usize, col: usize) -> String {
        format!("{} at row {row} col {col}", COLORS[color].0)
    }

    pub fn sample_at(&self, color: usize, row: usize, col: usize) -> Sample {
        let caption = self
            .vocab
            .encode(&self.caption_text(color, row, col))
            .expect("caption words are in the vocabulary");
        Sample {
            image: self.render(color, row, col),
            color,
            row,
            col,
            caption,
        }
    }

    pub fn sample(&mut self) -> Sample {
        let color = self.rng.random_range(0..COLORS.len());
        let row = self.rng.random_range(0..self.side);
        let col = self.rng.random_range(0..self.side);
        self.sample_at(color, row, col)
    }

    /// Recovers `(color, row, col)` from an image: the brightest cell and the
    /// nearest palette colour.
    pub fn describe(&self, image: &Image) -> (usize, usize, usize) {
        let cells = image.cells();
        let (mut best, mut best_energy) = (0, f64::NEG_INFINITY);
        for n in 0..cells.shape()[0] {
            let e: f64 = cells.row(n).iter().map(|v| v * v).sum();
            if e > best_energy {
                best = n;
                best_energy = e;
            }
        }
        let px = cells.row(best);
        let color = (0..COLORS.len())
            .min_by(|&a, &b| {
                let d = |k: usize| -> f64 {
                    COLORS[k].1.iter().zip(px).map(|(c, p)| (c - p) * (c - p)).sum()
                };
                d(a).total_cmp(&d(b))
            })
            .expect("non-empty palette");
        (color, best / self.side, best % self.side)
    }
}
