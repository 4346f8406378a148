//! Binary tamper masks: white (255) marks a tampered pixel.

use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WHITE: u8 = 255;
pub const BLACK: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Model,
    Baseline,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<u8>,
    pub provenance: Provenance,
}

impl Mask {
    /// Build a mask, rejecting anything other than 0/255.
    pub fn new(width: u32, height: u32, data: Vec<u8>, provenance: Provenance) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(Error::shape("mask", format!("{} values for {width}x{height}", data.len())));
        }
        if let Some(&bad) = data.iter().find(|&&v| v != WHITE && v != BLACK) {
            return Err(Error::NonBinaryMask(bad));
        }
        Ok(Self { width, height, data, provenance })
    }

    pub fn filled(width: u32, height: u32, value: bool, provenance: Provenance) -> Self {
        let v = if value { WHITE } else { BLACK };
        Self { width, height, data: vec![v; (width * height) as usize], provenance }
    }

    pub fn from_fn(width: u32, height: u32, provenance: Provenance, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(x, y) { WHITE } else { BLACK });
            }
        }
        Self { width, height, data, provenance }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_white(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize] == WHITE
    }

    pub fn white_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == WHITE).count()
    }

    /// Per-pixel class labels (1 = tampered), row-major.
    pub fn labels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| u8::from(v == WHITE)).collect()
    }

    pub fn complement(&self) -> Self {
        let data = self.data.iter().map(|&v| WHITE - v).collect();
        Self { data, ..self.clone() }
    }

    pub fn from_gray(image: &GrayImage, provenance: Provenance) -> Result<Self> {
        Self::new(image.width(), image.height(), image.as_raw().clone(), provenance)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_raw(self.width, self.height, self.data.clone()).expect("dimensions checked at construction")
    }

    pub fn load(path: &Path, provenance: Provenance) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_gray(&img.to_luma8(), provenance)
    }

    /// Write as an 8-bit single-channel PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Encode(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary_values() {
        assert!(matches!(Mask::new(2, 1, vec![0, 128], Provenance::Model), Err(Error::NonBinaryMask(128))));
        assert!(Mask::new(2, 2, vec![0, 255, 255], Provenance::Model).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = Mask::from_fn(5, 3, Provenance::GroundTruth, |x, y| (x + y) % 2 == 0);
        m.save_png(&path).unwrap();
        let back = Mask::load(&path, Provenance::GroundTruth).unwrap();
        assert_eq!(back, m);
        let raw = image::open(&path).unwrap();
        assert!(matches!(raw, image::DynamicImage::ImageLuma8(_)));
    }
}
