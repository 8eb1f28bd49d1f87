//! Sparse label maps and their PNG / run-length encodings.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-pixel class ids in `0..=class_count`; 0 marks unlabelled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseLabelMap {
    height: usize,
    width: usize,
    grid: Vec<u8>,
    class_count: usize,
    pub class_names: Vec<String>,
}

/// One horizontal run of a single class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleRecord {
    pub class: u32,
    pub row: u32,
    pub start: u32,
    pub len: u32,
}

fn default_names(c: usize) -> Vec<String> {
    (1..=c).map(|i| format!("class {i}")).collect()
}

impl SparseLabelMap {
    pub fn new(height: usize, width: usize, class_count: usize) -> Result<Self> {
        Self::from_grid(height, width, vec![0; height * width], class_count)
    }

    pub fn from_grid(height: usize, width: usize, grid: Vec<u8>, class_count: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("label map must be non-empty"));
        }
        if grid.len() != height * width {
            return Err(Error::shape(format!("{} labels for a {height}x{width} map", grid.len())));
        }
        if class_count == 0 || class_count > 255 {
            return Err(Error::arg(format!("class count {class_count} outside 1..=255")));
        }
        if let Some(&bad) = grid.iter().find(|&&v| v as usize > class_count) {
            return Err(Error::arg(format!("label {bad} exceeds class count {class_count}")));
        }
        Ok(Self {
            height,
            width,
            grid,
            class_count,
            class_names: default_names(class_count),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.grid[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) -> Result<()> {
        if y >= self.height || x >= self.width {
            return Err(Error::arg(format!("pixel ({y}, {x}) outside {}x{}", self.height, self.width)));
        }
        if class as usize > self.class_count {
            return Err(Error::arg(format!("class {class} exceeds class count {}", self.class_count)));
        }
        self.grid[y * self.width + x] = class;
        Ok(())
    }

    /// Pixels per class, index 0 counting class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &v in &self.grid {
            if v > 0 {
                counts[v as usize - 1] += 1;
            }
        }
        counts
    }

    pub fn labelled_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v > 0).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, 1],
            self.grid.iter().map(|&v| v as f32).collect(),
        )
        .expect("dims match grid")
    }

    pub fn from_rle(height: usize, width: usize, class_count: usize, records: &[RleRecord]) -> Result<Self> {
        let mut map = Self::new(height, width, class_count)?;
        for (i, r) in records.iter().enumerate() {
            if r.class == 0 {
                return Err(Error::arg(format!("record {i}: class 0 is reserved for unlabelled pixels")));
            }
            if r.class as usize > class_count {
                return Err(Error::arg(format!("record {i}: class {} exceeds class count {class_count}", r.class)));
            }
            let (row, start, len) = (r.row as usize, r.start as usize, r.len as usize);
            if row >= height || len == 0 || start.checked_add(len).is_none_or(|end| end > width) {
                return Err(Error::arg(format!("record {i}: run outside the {height}x{width} image")));
            }
            map.grid[row * width + start..row * width + start + len].fill(r.class as u8);
        }
        Ok(map)
    }

    /// Maximal runs of equal non-zero labels, row by row.
    pub fn to_rle(&self) -> Vec<RleRecord> {
        let mut out = Vec::new();
        for (row, line) in self.grid.chunks(self.width).enumerate() {
            let mut x = 0;
            while x < self.width {
                let v = line[x];
                let start = x;
                while x < self.width && line[x] == v {
                    x += 1;
                }
                if v > 0 {
                    out.push(RleRecord {
                        class: v as u32,
                        row: row as u32,
                        start: start as u32,
                        len: (x - start) as u32,
                    });
                }
            }
        }
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_indexed_png(self.height, self.width, &self.grid, self.class_count)
    }

    /// Reads an 8-bit indexed (or greyscale) PNG, index 0 = unlabelled.
    pub fn from_png(bytes: &[u8], class_count: usize) -> Result<Self> {
        let (h, w, grid) = decode_indexed_png(bytes)?;
        Self::from_grid(h, w, grid, class_count)
    }
}

/// Distinct colours for up to 255 classes; index 0 is black.
pub fn palette(class_count: usize) -> Vec<u8> {
    const BASE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    let mut p = vec![0, 0, 0];
    for i in 0..class_count {
        let c = BASE[i % BASE.len()];
        let shade = 1.0 - 0.15 * (i / BASE.len()) as f32;
        p.extend(c.iter().map(|&v| (v as f32 * shade.max(0.2)) as u8));
    }
    p
}

pub fn encode_indexed_png(height: usize, width: usize, indices: &[u8], class_count: usize) -> Result<Vec<u8>> {
    if indices.len() != height * width {
        return Err(Error::shape("index buffer does not match dims"));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette(class_count.max(1)));
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer.write_image_data(indices).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_indexed_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(Error::Image(format!(
            "label PNG must be 8-bit indexed or greyscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| Error::Image("PNG too large".into()))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    let stride = frame.line_size;
    let mut grid = Vec::with_capacity(h * w);
    for row in buf.chunks(stride).take(h) {
        grid.extend_from_slice(&row[..w]);
    }
    Ok((h, w, grid))
}
