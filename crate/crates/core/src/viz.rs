//! Heatmap rendering to binary PGM (P5) and PPM (P6).
//!
//! Maps are min-max normalised per map (a constant map is all zero),
//! upscaled nearest-neighbour by `cell_pixels`, and coloured with a
//! five-anchor viridis-like palette. Overlays blend the palette colour
//! with the base image at alpha 0.5. Output is a pure function of the
//! inputs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Image;
use crate::tensor::Tensor;

pub const PALETTE: [[u8; 3]; 5] = [
    [68, 1, 84],
    [59, 82, 139],
    [33, 145, 140],
    [94, 201, 98],
    [253, 231, 37],
];

pub const OVERLAY_ALPHA: f64 = 0.5;

pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Piecewise-linear interpolation between the palette anchors.
pub fn palette(v: f64) -> [u8; 3] {
    let x = v.clamp(0.0, 1.0) * (PALETTE.len() - 1) as f64;
    let i = (x.floor() as usize).min(PALETTE.len() - 2);
    let f = x - i as f64;
    let (a, b) = (PALETTE[i], PALETTE[i + 1]);
    std::array::from_fn(|c| (f64::from(a[c]) + f * (f64::from(b[c]) - f64::from(a[c]))).round() as u8)
}

/// A square grid of intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    side: usize,
    intensity: Vec<f64>,
}

fn square_side(n: usize) -> Result<usize> {
    let s = n.isqrt();
    if n == 0 || s * s != n {
        return Err(Error::InvalidShape(format!("map of {n} values is not a square grid")));
    }
    Ok(s)
}

impl Heatmap {
    /// Normalises a `(1, N)`, `(N,)` or `(√N, √N)` map.
    pub fn from_map(map: &Tensor) -> Result<Self> {
        let flat = match map.shape() {
            [_] | [1, _] => true,
            [r, c] => r == c,
            _ => false,
        };
        if !flat {
            return Err(Error::InvalidShape(format!(
                "expected a (1, N) or square map, got {:?}",
                map.shape()
            )));
        }
        Self::from_values(map.data())
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("heatmap".into()));
        }
        Ok(Self {
            side: square_side(values.len())?,
            intensity: minmax_normalize(values),
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    fn pixel_cell(&self, px: usize, cell_pixels: usize) -> usize {
        px / cell_pixels
    }

    /// Grayscale bytes, `side·cell_pixels` square, row-major.
    pub fn gray_pixels(&self, cell_pixels: usize) -> Vec<u8> {
        let w = self.side * cell_pixels;
        let mut out = Vec::with_capacity(w * w);
        for y in 0..w {
            for x in 0..w {
                let cell = self.pixel_cell(y, cell_pixels) * self.side + self.pixel_cell(x, cell_pixels);
                out.push(to_byte(self.intensity[cell]));
            }
        }
        out
    }

    /// Palette RGB bytes, optionally blended over `base` (cells in
    /// `[0, 1]`, sampled nearest-neighbour).
    pub fn rgb_pixels(&self, cell_pixels: usize, base: Option<&Image>) -> Vec<u8> {
        let w = self.side * cell_pixels;
        let mut out = Vec::with_capacity(w * w * 3);
        for y in 0..w {
            for x in 0..w {
                let cell = self.pixel_cell(y, cell_pixels) * self.side + self.pixel_cell(x, cell_pixels);
                let heat = palette(self.intensity[cell]);
                match base {
                    None => out.extend_from_slice(&heat),
                    Some(img) => {
                        let s = img.side();
                        let bc = (y * s / w) * s + (x * s / w);
                        let cells = img.cells();
                        let ch = img.channels();
                        for c in 0..3 {
                            let b = cells.get(&[bc, c.min(ch - 1)]).clamp(0.0, 1.0) * 255.0;
                            let v = OVERLAY_ALPHA * f64::from(heat[c]) + (1.0 - OVERLAY_ALPHA) * b;
                            out.push(v.round() as u8);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn to_pgm(&self, cell_pixels: usize) -> Vec<u8> {
        let w = self.side * cell_pixels;
        encode_pgm(w, w, &self.gray_pixels(cell_pixels))
    }

    pub fn to_ppm(&self, cell_pixels: usize, base: Option<&Image>) -> Vec<u8> {
        let w = self.side * cell_pixels;
        encode_ppm(w, w, &self.rgb_pixels(cell_pixels, base))
    }
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5/P6 file written by this module into `(width, height,
/// channels, pixels)`.
pub fn decode_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::InvalidShape(format!("not a binary PGM/PPM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(other)),
    };
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    if fields[3] != "255" {
        return Err(bad("maxval"));
    }
    let pixels = bytes.get(pos..).ok_or_else(|| bad("no pixels"))?.to_vec();
    if pixels.len() != w * h * channels {
        return Err(bad("pixel count"));
    }
    Ok((w, h, channels, pixels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Pgm,
    Ppm,
}

impl Format {
    /// `.pgm` → grayscale, anything else → colour.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => Format::Pgm,
            _ => Format::Ppm,
        }
    }
}

/// Renders a `(1, N)` patch map; the format follows the file extension.
pub fn render_patch_map(map: &Tensor, path: impl AsRef<Path>, cell_pixels: usize, base: Option<&Image>) -> Result<()> {
    let path = path.as_ref();
    let heat = Heatmap::from_map(map)?;
    let bytes = match Format::from_path(path) {
        Format::Pgm => heat.to_pgm(cell_pixels),
        Format::Ppm => heat.to_ppm(cell_pixels, base),
    };
    fs::write(path, bytes)?;
    Ok(())
}

/// Tiles of equal side arranged in a `cols`-wide grid without borders.
pub fn contact_sheet(tiles: &[Heatmap], cell_pixels: usize) -> Result<Vec<u8>> {
    let cols = square_side(tiles.len())?;
    let side = tiles[0].side();
    if tiles.iter().any(|t| t.side() != side) {
        return Err(Error::InvalidShape("contact sheet tiles differ in size".into()));
    }
    let tile_w = side * cell_pixels;
    let w = cols * tile_w;
    let mut out = vec![0u8; w * w];
    for (i, t) in tiles.iter().enumerate() {
        let (ty, tx) = (i / cols, i % cols);
        let px = t.gray_pixels(cell_pixels);
        for y in 0..tile_w {
            let dst = (ty * tile_w + y) * w + tx * tile_w;
            out[dst..dst + tile_w].copy_from_slice(&px[y * tile_w..(y + 1) * tile_w]);
        }
    }
    Ok(encode_pgm(w, w, &out))
}

/// One grayscale tile per query row (`query_<m>.pgm`) plus
/// `contact_sheet.pgm`; returns the written paths.
pub fn render_query_grid(query_to_patch: &Tensor, dir: impl AsRef<Path>, cell_pixels: usize) -> Result<Vec<PathBuf>> {
    let (m, n) = query_to_patch.dims2()?;
    square_side(m)?;
    square_side(n)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tiles = Vec::with_capacity(m);
    let mut paths = Vec::with_capacity(m + 1);
    for q in 0..m {
        let heat = Heatmap::from_values(query_to_patch.row(q))?;
        let path = dir.join(format!("query_{q}.pgm"));
        fs::write(&path, heat.to_pgm(cell_pixels))?;
        paths.push(path);
        tiles.push(heat);
    }
    let sheet = dir.join("contact_sheet.pgm");
    fs::write(&sheet, contact_sheet(&tiles, cell_pixels)?)?;
    paths.push(sheet);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::{plan_bins, structural_map_avg, structural_map_linear};

    #[test]
    fn constant_map_is_black() {
        let h = Heatmap::from_values(&[0.3; 4]).unwrap();
        let pgm = h.to_pgm(2);
        assert_eq!(&pgm[..11], b"P5\n4 4\n255\n");
        assert!(pgm[11..].iter().all(|&b| b == 0));
    }

    #[test]
    fn one_hot_lights_one_cell() {
        let mut v = vec![0.0; 9];
        v[4] = 2.0;
        let px = Heatmap::from_values(&v).unwrap().gray_pixels(3);
        for y in 0..9 {
            for x in 0..9 {
                let lit = (3..6).contains(&y) && (3..6).contains(&x);
                assert_eq!(px[y * 9 + x], if lit { 255 } else { 0 });
            }
        }
    }

    #[test]
    fn palette_endpoints_and_midpoint() {
        assert_eq!(palette(0.0), PALETTE[0]);
        assert_eq!(palette(1.0), PALETTE[4]);
        assert_eq!(palette(0.5), PALETTE[2]);
        assert_eq!(palette(0.125), [64, 42, 112]);
    }

    #[test]
    fn non_square_rejected() {
        assert!(Heatmap::from_values(&[1.0, 2.0, 3.0]).is_err());
        assert!(Heatmap::from_map(&Tensor::zeros(&[2, 3])).is_err());
        assert!(Heatmap::from_values(&[f64::NAN; 4]).is_err());
    }

    #[test]
    fn overlay_blends_half() {
        let h = Heatmap::from_values(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        let mut img = Image::blank(2, 3);
        img.cells_mut().set(&[0, 0], 1.0);
        let px = h.rgb_pixels(1, Some(&img));
        // cell 0: palette[0] over red
        assert_eq!(&px[..3], &[162, 1, 42]);
        // cell 1: palette[4] over black
        assert_eq!(&px[3..6], &[127, 116, 19]);
    }

    #[test]
    fn pnm_roundtrip() {
        let h = Heatmap::from_values(&[0.0, 0.5, 0.25, 1.0]).unwrap();
        let (w, ht, c, px) = decode_pnm(&h.to_ppm(2, None)).unwrap();
        assert_eq!((w, ht, c), (4, 4, 3));
        assert_eq!(px, h.rgb_pixels(2, None));
        assert!(decode_pnm(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn query_grid_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let plan = plan_bins(4, 2).unwrap();
        let paths = render_query_grid(&structural_map_avg(&plan), dir.path(), 1).unwrap();
        assert_eq!(paths.len(), 5);
        for m in 0..4 {
            let (_, _, _, px) = decode_pnm(&fs::read(&paths[m]).unwrap()).unwrap();
            let lit: Vec<usize> = (0..16).filter(|&i| px[i] == 255).collect();
            assert_eq!(lit, plan.window_indices(m).collect::<Vec<_>>());
            assert!(px.iter().all(|&b| b == 0 || b == 255));
        }

        let paths = render_query_grid(&structural_map_linear(4), dir.path().join("lin"), 1).unwrap();
        for m in 0..4 {
            let (_, _, _, px) = decode_pnm(&fs::read(&paths[m]).unwrap()).unwrap();
            assert_eq!(px.iter().position(|&b| b == 255), Some(m));
        }

        let one = Tensor::new(vec![1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let paths = render_query_grid(&one, dir.path().join("one"), 2).unwrap();
        assert_eq!(fs::read(&paths[0]).unwrap(), fs::read(&paths[1]).unwrap());
    }
}
