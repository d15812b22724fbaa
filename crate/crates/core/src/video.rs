//! Pixel-space containers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// `frames × height × width × channels` video, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// `height × width × 3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Video {
    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Video {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let [frames, height, width, channels] = shape;
        if data.len() != frames * height * width * channels {
            return Err(Error::shape(alloc::format!(
                "{} values for video {frames}x{height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Video {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    #[inline]
    pub fn index(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.height + y) * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(f, y, x, c)]
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame_data(&self, f: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame_data_mut(&mut self, f: usize) -> &mut [f64] {
        let n = self.frame_len();
        &mut self.data[f * n..(f + 1) * n]
    }

    /// Copy one frame out as an RGB image (requires three channels).
    pub fn frame(&self, f: usize) -> Image {
        assert_eq!(self.channels, 3, "frame() needs RGB video");
        Image {
            height: self.height,
            width: self.width,
            data: self.frame_data(f).to_vec(),
        }
    }

    pub fn from_frames(frames: &[Image]) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty("video frames"))?;
        let mut data = Vec::with_capacity(frames.len() * first.data.len());
        for im in frames {
            if im.height != first.height || im.width != first.width {
                return Err(Error::shape("frames differ in size"));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Video {
            frames: frames.len(),
            height: first.height,
            width: first.width,
            channels: 3,
            data,
        })
    }

    pub fn clamp01(&self) -> Video {
        let mut v = self.clone();
        v.data.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        v
    }
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::shape(alloc::format!(
                "{} values for image {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Crop `[x0, x1) × [y0, y1)`, clamped to the image.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Image {
        let (x1, y1) = (x1.min(self.width), y1.min(self.height));
        let (x0, y0) = (x0.min(x1), y0.min(y1));
        let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
        for y in y0..y1 {
            let row = &self.data[(y * self.width + x0) * 3..(y * self.width + x1) * 3];
            data.extend_from_slice(row);
        }
        Image {
            height: y1 - y0,
            width: x1 - x0,
            data,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn to_video(&self) -> Video {
        Video {
            frames: 1,
            height: self.height,
            width: self.width,
            channels: 3,
            data: self.data.clone(),
        }
    }
}

/// Rec. 601 luma.
#[inline]
pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}
