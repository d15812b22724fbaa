//! JSON-over-HTTP backend adapters. Every call posts
//! `{kind, payload_b64, shape, labels?, region?}` and expects
//! `{tokens_b64, shape}` back; tensors travel as little-endian f32 and text
//! as UTF-8.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use mcvc_core::conditioning::{DenseVisualTokens, ImageEncoderBackend, TextEncoderBackend};
use mcvc_core::datapipe::{Captioner, Classifier, Detector, FaceDetector, Mask, Segmenter};
use mcvc_core::tensor::Mat;
use mcvc_core::video::{Image, Video};
use mcvc_core::vision::BoundingBox;
use serde::{Deserialize, Serialize};

type CoreResult<T> = mcvc_core::Result<T>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub kind: String,
    pub payload_b64: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub tokens_b64: String,
    pub shape: Vec<usize>,
}

pub fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn f32_values(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    )
}

impl Request {
    pub fn tensor(kind: &str, values: &[f64], shape: Vec<usize>) -> Self {
        Request {
            kind: kind.into(),
            payload_b64: B64.encode(f32_bytes(values)),
            shape,
            labels: None,
            region: None,
        }
    }

    pub fn text(kind: &str, text: &str) -> Self {
        Request {
            kind: kind.into(),
            payload_b64: B64.encode(text.as_bytes()),
            shape: vec![text.len()],
            labels: None,
            region: None,
        }
    }

    pub fn payload(&self) -> Option<Vec<u8>> {
        B64.decode(&self.payload_b64).ok()
    }
}

impl Response {
    pub fn tensor(values: &[f64], shape: Vec<usize>) -> Self {
        Response {
            tokens_b64: B64.encode(f32_bytes(values)),
            shape,
        }
    }

    pub fn text(text: &str) -> Self {
        Response {
            tokens_b64: B64.encode(text.as_bytes()),
            shape: vec![text.len()],
        }
    }
}

/// One backend server.
#[derive(Clone, Debug)]
pub struct HttpClient {
    url: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpClient { url: url.into(), agent }
    }

    pub fn call(&self, req: &Request) -> CoreResult<(Vec<u8>, Vec<usize>)> {
        let fail = |m: String| mcvc_core::Error::backend(req.kind.clone(), m);
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(req)
            .map_err(|e| fail(e.to_string()))?;
        let body: Response = resp.body_mut().read_json().map_err(|e| fail(e.to_string()))?;
        let bytes = B64.decode(&body.tokens_b64).map_err(|e| fail(e.to_string()))?;
        Ok((bytes, body.shape))
    }

    fn tensor(&self, req: &Request, cols: Option<usize>) -> CoreResult<(Vec<f64>, usize, usize)> {
        let fail = |m: &str| mcvc_core::Error::backend(req.kind.clone(), m);
        let (bytes, shape) = self.call(req)?;
        let values = f32_values(&bytes).ok_or_else(|| fail("payload is not f32"))?;
        let (rows, c) = match shape.as_slice() {
            &[r, c] => (r, c),
            &[n] => (1, n),
            _ => return Err(fail("expected a 1- or 2-d tensor")),
        };
        if rows * c != values.len() || cols.is_some_and(|want| want != c && rows > 0) {
            return Err(fail("response shape does not match its payload"));
        }
        Ok((values, rows, c))
    }
}

pub struct HttpImageEncoder {
    pub client: HttpClient,
    pub grid: usize,
    pub dim: usize,
}

impl ImageEncoderBackend for HttpImageEncoder {
    fn encode(&self, image: &Image) -> CoreResult<DenseVisualTokens> {
        let req = Request::tensor("image", &image.data, vec![image.height, image.width, 3]);
        let (v, r, c) = self.client.tensor(&req, Some(self.dim))?;
        Ok(DenseVisualTokens {
            grid: self.grid,
            tokens: Mat::from_vec(r, c, v)?,
        })
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

pub struct HttpTextEncoder {
    pub client: HttpClient,
    pub dim: usize,
}

impl TextEncoderBackend for HttpTextEncoder {
    fn encode(&self, text: &str) -> CoreResult<Mat> {
        let (v, r, c) = self.client.tensor(&Request::text("text", text), Some(self.dim))?;
        Mat::from_vec(r, c, v)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

fn image_request(kind: &str, img: &Image) -> Request {
    Request::tensor(kind, &img.data, vec![img.height, img.width, 3])
}

fn rows_to_boxes(v: &[f64], rows: usize, cols: usize, labels: &[String], kind: &str) -> CoreResult<Vec<BoundingBox>> {
    (0..rows)
        .map(|i| {
            let r = &v[i * cols..(i + 1) * cols];
            let label = if cols >= 6 {
                let idx = r[5] as usize;
                labels
                    .get(idx)
                    .cloned()
                    .ok_or_else(|| mcvc_core::Error::backend(kind, "label index out of range"))?
            } else {
                String::from("face")
            };
            Ok(BoundingBox {
                x0: r[0],
                y0: r[1],
                x1: r[2],
                y1: r[3],
                score: r[4],
                label,
            })
        })
        .collect()
}

/// Datapipe backends behind one server, dispatched on `kind`.
pub struct HttpPipelineBackend {
    pub client: HttpClient,
}

impl Captioner for HttpPipelineBackend {
    fn caption(&self, video: &Video) -> CoreResult<String> {
        let req = Request::tensor("caption", &video.data, video.shape().to_vec());
        let (bytes, _) = self.client.call(&req)?;
        String::from_utf8(bytes).map_err(|_| mcvc_core::Error::backend("caption", "caption is not UTF-8"))
    }
}

impl Detector for HttpPipelineBackend {
    fn detect(&self, frame: &Image, labels: &[String]) -> CoreResult<Vec<BoundingBox>> {
        let mut req = image_request("detect", frame);
        req.labels = Some(labels.to_vec());
        let (v, rows, cols) = self.client.tensor(&req, Some(6))?;
        rows_to_boxes(&v, rows, cols, labels, "detect")
    }
}

impl Classifier for HttpPipelineBackend {
    fn scores(&self, crop: &Image, labels: &[String]) -> CoreResult<Vec<f64>> {
        let mut req = image_request("classify", crop);
        req.labels = Some(labels.to_vec());
        let (v, _, cols) = self.client.tensor(&req, Some(labels.len()))?;
        if cols != labels.len() {
            return Err(mcvc_core::Error::backend("classify", "one score per label expected"));
        }
        Ok(v)
    }
}

impl Segmenter for HttpPipelineBackend {
    fn segment(&self, frame: &Image, region: &BoundingBox) -> CoreResult<Mask> {
        let mut req = image_request("segment", frame);
        req.region = Some([region.x0, region.y0, region.x1, region.y1]);
        let (v, rows, cols) = self.client.tensor(&req, Some(frame.width))?;
        if rows != frame.height {
            return Err(mcvc_core::Error::backend("segment", "mask size differs from the frame"));
        }
        Ok(Mask {
            width: cols,
            height: rows,
            data: v.iter().map(|&x| x > 0.5).collect(),
        })
    }
}

impl FaceDetector for HttpPipelineBackend {
    fn faces(&self, crop: &Image) -> CoreResult<Vec<BoundingBox>> {
        let (v, rows, cols) = self.client.tensor(&image_request("face", crop), Some(5))?;
        rows_to_boxes(&v, rows, cols, &[], "face")
    }
}
