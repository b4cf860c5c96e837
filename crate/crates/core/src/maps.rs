//! Attention-map export as binary PGM (P5) images.
//!
//! Each map is min–max normalised on its own to `0..=255`; a map with zero
//! range becomes all zeros. The mosaic places layers on rows and heads on
//! columns, one `N×N` tile each. The unnormalised maps are also written to a
//! tensor container so their structure can be checked exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::serialize::write_container;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_N: usize = 512;

/// Grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::invalid("not a binary PGM with maxval 255");
        // header: magic, width, height, maxval, each followed by whitespace
        let mut fields = Vec::with_capacity(4);
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
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
        }
        pos += 1;
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad());
        }
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        let pixels = bytes.get(pos..).ok_or_else(bad)?.to_vec();
        if pixels.len() != width * height {
            return Err(bad());
        }
        Ok(Self { width, height, pixels })
    }
}

/// Min–max normalisation of one map to `0..=255`.
pub fn normalize(map: &Tensor) -> Gray {
    let (h, w) = map.shape().as_matrix();
    let data = map.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let pixels = data
        .iter()
        .map(|&x| {
            if range > 0.0 {
                ((x - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Gray {
        width: w,
        height: h,
        pixels,
    }
}

/// Tiles `tiles[layer][head]` (all `n×n`); absent tiles stay black.
pub fn mosaic(tiles: &[Vec<Gray>], n: usize) -> Gray {
    let rows = tiles.len();
    let cols = tiles.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * n;
    let mut pixels = vec![0u8; rows * n * width];
    for (l, layer) in tiles.iter().enumerate() {
        for (h, tile) in layer.iter().enumerate() {
            for i in 0..n {
                let dst = (l * n + i) * width + h * n;
                pixels[dst..dst + n].copy_from_slice(&tile.pixels[i * n..(i + 1) * n]);
            }
        }
    }
    Gray {
        width,
        height: rows * n,
        pixels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportReport {
    pub n: usize,
    pub layers: usize,
    pub heads: Vec<usize>,
    pub files: Vec<PathBuf>,
    pub mosaic: PathBuf,
    pub mosaic_width: usize,
    pub mosaic_height: usize,
    /// Unnormalised maps, named `layer{l}.head{h}`.
    pub raw: PathBuf,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `layer{l}_head{h}.pgm`, `mosaic.pgm` and `maps.bin` into `dir`.
pub fn export_maps(maps: &[Vec<Tensor>], dir: &Path, max_n: usize) -> Result<ExportReport> {
    let n = maps
        .iter()
        .flatten()
        .map(|m| m.rows())
        .next()
        .ok_or_else(|| Error::invalid("no maps to export"))?;
    if n > max_n {
        return Err(Error::invalid(format!("N = {n} exceeds the map export cap of {max_n}")));
    }
    if let Some(m) = maps.iter().flatten().find(|m| m.shape().as_matrix() != (n, n)) {
        return Err(Error::invalid(format!("map of shape {} is not {n}x{n}", m.shape())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut tiles = Vec::with_capacity(maps.len());
    let mut raw = Vec::new();
    for (l, layer) in maps.iter().enumerate() {
        let mut row = Vec::with_capacity(layer.len());
        for (h, m) in layer.iter().enumerate() {
            let g = normalize(m);
            let path = dir.join(format!("layer{l}_head{h}.pgm"));
            write(&path, &g.encode_pgm())?;
            files.push(path);
            row.push(g);
            raw.push((format!("layer{l}.head{h}"), m.clone()));
        }
        tiles.push(row);
    }
    let mos = mosaic(&tiles, n);
    let mosaic_path = dir.join("mosaic.pgm");
    write(&mosaic_path, &mos.encode_pgm())?;
    let raw_path = dir.join("maps.bin");
    write_container(&raw_path, &raw)?;
    Ok(ExportReport {
        n,
        layers: maps.len(),
        heads: maps.iter().map(Vec::len).collect(),
        files,
        mosaic: mosaic_path,
        mosaic_width: mos.width,
        mosaic_height: mos.height,
        raw: raw_path,
    })
}

/// Whether `m[i][j] == m[(i+1) mod N][(j+1) mod N]` exactly.
pub fn is_circulant(m: &Tensor) -> bool {
    let n = m.rows();
    m.cols() == n && (0..n).all(|i| (0..n).all(|j| m.at(i, j) == m.at((i + 1) % n, (j + 1) % n)))
}
