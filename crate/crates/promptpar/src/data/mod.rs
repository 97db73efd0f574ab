//! Dataset ingestion, preprocessing, splitting, and the synthetic
//! desk-scale benchmark generator.

pub mod annotations;
pub mod preprocess;
pub mod split;
pub mod synthetic;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use annotations::{load_dataset, write_annotations, IngestionReport};
pub use preprocess::{augment, flip_horizontal, pad_and_resize, pad_to_square, resize_bilinear};
pub use split::{standard_split, zero_shot_split, SplitMode, SplitSpec};
pub use synthetic::{decide_labels, generate_synthetic, write_synthetic, SyntheticConfig};

/// Decoded image as row-major `(h, w, rgb)` floats in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    /// len = height * width * 3
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * 3);
        ImageTensor {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Decode a raster file into the [0, 1] float representation.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        for px in img.pixels() {
            data.push(px.0[0] as f64 / 255.0);
            data.push(px.0[1] as f64 / 255.0);
            data.push(px.0[2] as f64 / 255.0);
        }
        Ok(ImageTensor::new(h as usize, w as usize, data))
    }

    /// Write as an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    (self.get(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(y, x, 1).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(y, x, 2).clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Sample {
    pub image_name: String,
    pub identity: Option<String>,
    pub labels: Vec<u8>,
}

/// A loaded dataset: records plus the directory its images live in.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    pub n_attributes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load_image(&self, index: usize) -> Result<ImageTensor> {
        let sample = &self.samples[index];
        ImageTensor::open(&self.root.join(&sample.image_name))
    }

    /// Binary label matrix rows for the given sample indices.
    pub fn label_rows(&self, indices: &[usize]) -> Vec<Vec<u8>> {
        indices.iter().map(|&i| self.samples[i].labels.clone()).collect()
    }

    /// Restrict to a subset of samples (order follows `indices`).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            root: self.root.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            n_attributes: self.n_attributes,
        }
    }
}
