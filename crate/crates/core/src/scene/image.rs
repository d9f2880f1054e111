//! Minimal float image container shared by normal maps, masks and renders.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageF32 {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(width: u32, height: u32, channels: u32) -> Self {
        ImageF32 {
            width,
            height,
            channels,
            data: vec![0.0; (width * height * channels) as usize],
        }
    }

    pub fn from_data(width: u32, height: u32, channels: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != (width * height * channels) as usize {
            return Err(Error::invalid(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(ImageF32 {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixel_index(&self, x: u32, y: u32) -> usize {
        ((y * self.width + x) * self.channels) as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u32) -> f32 {
        self.data[self.pixel_index(x, y) + c as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u32, v: f32) {
        let i = self.pixel_index(x, y) + c as usize;
        self.data[i] = v;
    }

    #[inline]
    pub fn get3(&self, x: u32, y: u32) -> [f32; 3] {
        let i = self.pixel_index(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set3(&mut self, x: u32, y: u32, v: [f32; 3]) {
        let i = self.pixel_index(x, y);
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn pixels(&self) -> u32 {
        self.width * self.height
    }
}
