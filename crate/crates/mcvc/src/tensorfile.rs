//! Raw tensor files: one JSON header line `{shape, dtype, fps}` followed by
//! little-endian f32 values in row-major order.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use mcvc_core::video::{Image, Video};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub const DTYPE: &str = "f32le";
pub const DEFAULT_FPS: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

pub fn encode(header: &Header, values: &[f64]) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serializes");
    out.push(b'\n');
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<(Header, Vec<f64>)> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::parse(origin, e))?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| Error::parse(origin, e))?;
    if header.dtype != DTYPE {
        return Err(Error::parse(origin, format!("unsupported dtype {:?}", header.dtype)));
    }
    let count: usize = header.shape.iter().product();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::parse(origin, e))?;
    if payload.len() != count * 4 {
        return Err(Error::parse(
            origin,
            format!("payload has {} bytes, shape needs {}", payload.len(), count * 4),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((header, values))
}

pub fn video_bytes(video: &Video, fps: f64) -> Vec<u8> {
    let header = Header {
        shape: video.shape().to_vec(),
        dtype: DTYPE.into(),
        fps: Some(fps),
    };
    encode(&header, &video.data)
}

pub fn write_video(path: &Path, video: &Video, fps: f64) -> Result<()> {
    fsutil::write_atomic(path, &video_bytes(video, fps))
}

/// Images are stored as `[H, W, C]`; a `[1, H, W, C]` video also reads as an image.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let header = Header {
        shape: vec![image.height, image.width, 3],
        dtype: DTYPE.into(),
        fps: None,
    };
    fsutil::write_atomic(path, &encode(&header, &image.data))
}

pub fn read_video(path: &Path) -> Result<(Video, Option<f64>)> {
    let bytes = fsutil::read(path)?;
    let origin = path.display().to_string();
    let (h, values) = decode(&bytes, &origin)?;
    let shape: [usize; 4] = match h.shape.as_slice() {
        &[f, hh, w, c] => [f, hh, w, c],
        &[hh, w, c] => [1, hh, w, c],
        other => {
            return Err(Error::parse(
                origin,
                format!("expected a 3- or 4-d tensor, got shape {other:?}"),
            ))
        }
    };
    Ok((Video::from_vec(shape, values)?, h.fps))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (v, _) = read_video(path)?;
    if v.frames != 1 || v.channels != 3 {
        return Err(Error::parse(path.display().to_string(), "expected a single RGB image"));
    }
    Ok(v.frame(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_f32_values() {
        let v = Video::from_vec([2, 2, 3, 3], (0..36).map(|i| i as f64 / 7.0).collect()).unwrap();
        let bytes = video_bytes(&v, 15.0);
        let first = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes[..first]).unwrap(),
            r#"{"shape":[2,2,3,3],"dtype":"f32le","fps":15.0}"#
        );
        let (h, back) = decode(&bytes, "mem").unwrap();
        assert_eq!(h.shape, vec![2, 2, 3, 3]);
        for (a, b) in v.data.iter().zip(&back) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let v = Video::zeros(1, 2, 2, 3);
        let mut bytes = video_bytes(&v, 15.0);
        bytes.pop();
        assert!(matches!(decode(&bytes, "mem"), Err(Error::Parse { .. })));
    }
}
