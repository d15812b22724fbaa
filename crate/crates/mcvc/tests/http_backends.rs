use std::collections::BTreeMap;
use std::thread;
use std::time::Duration;

use mcvc::http::{f32_values, HttpClient, HttpImageEncoder, HttpPipelineBackend, HttpTextEncoder, Request, Response};
use mcvc_core::conditioning::{ImageEncoderBackend, TextEncoderBackend, ToyImageEncoder, ToyTextEncoder};
use mcvc_core::datapipe::{self, BackendSuite, Classifier, FaceDetector, Flaw, PipelineConfig, Taxonomy};
use mcvc_core::toydata::{self, Color, Shape};
use mcvc_core::video::{Image, Video};
use mcvc_core::vision::BoundingBox;

/// Serves the toy backends over the JSON protocol until the process exits.
fn serve(mut reply: impl FnMut(Request) -> Option<Response> + Send + 'static) -> String {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", server.server_addr().to_ip().unwrap());
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let parsed: Request = serde_json::from_str(&body).unwrap();
            let resp = match reply(parsed) {
                Some(r) => tiny_http::Response::from_string(serde_json::to_string(&r).unwrap()),
                None => tiny_http::Response::from_string("nope").with_status_code(500),
            };
            let _ = req.respond(resp);
        }
    });
    url
}

fn image_of(req: &Request) -> Image {
    let v = f32_values(&req.payload().unwrap()).unwrap();
    Image::from_vec(req.shape[0], req.shape[1], v).unwrap()
}

fn boxes_to_rows(boxes: &[BoundingBox], labels: &[String]) -> Response {
    let mut v = Vec::new();
    for b in boxes {
        v.extend([b.x0, b.y0, b.x1, b.y1, b.score]);
        if !labels.is_empty() {
            v.push(labels.iter().position(|l| *l == b.label).unwrap() as f64);
        }
    }
    let cols = if labels.is_empty() { 5 } else { 6 };
    Response::tensor(&v, vec![boxes.len(), cols])
}

fn toy_pipeline_server() -> String {
    let toy = BackendSuite::toy(11);
    serve(move |req| {
        let labels = req.labels.clone().unwrap_or_default();
        Some(match req.kind.as_str() {
            "caption" => {
                let v = f32_values(&req.payload().unwrap()).unwrap();
                let s = &req.shape;
                let video = Video::from_vec([s[0], s[1], s[2], s[3]], v).unwrap();
                Response::text(&toy.captioner.caption(&video).unwrap())
            }
            "detect" => boxes_to_rows(&toy.detector.detect(&image_of(&req), &labels).unwrap(), &labels),
            "classify" => {
                let s = toy.classifier.scores(&image_of(&req), &labels).unwrap();
                Response::tensor(&s, vec![1, s.len()])
            }
            "segment" => {
                let [x0, y0, x1, y1] = req.region.unwrap();
                let m = toy
                    .segmenter
                    .segment(&image_of(&req), &BoundingBox::new(x0, y0, x1, y1, 1.0, ""))
                    .unwrap();
                let v: Vec<f64> = m.data.iter().map(|&b| b as u8 as f64).collect();
                Response::tensor(&v, vec![m.height, m.width])
            }
            "face" => boxes_to_rows(&toy.face_detector.faces(&image_of(&req)).unwrap(), &[]),
            _ => return None,
        })
    })
}

fn http_suite(url: &str) -> BackendSuite {
    let b = || HttpPipelineBackend {
        client: HttpClient::new(url, Duration::from_secs(10)),
    };
    BackendSuite {
        captioner: Box::new(b()),
        detector: Box::new(b()),
        classifier: Box::new(b()),
        segmenter: Box::new(b()),
        face_detector: Box::new(b()),
    }
}

#[test]
fn remote_pipeline_agrees_with_local_toys() {
    let url = toy_pipeline_server();
    let remote = http_suite(&url);
    let local = BackendSuite::toy(11);
    let (tax, cfg) = (Taxonomy::default(), PipelineConfig::default());
    let corpus = datapipe::planted_flaw_corpus(7, 10, &Flaw::ALL, 11).unwrap();
    let mut reasons = BTreeMap::new();
    for item in &corpus {
        let a = datapipe::run_pipeline(&item.video_id, &item.video, &local, &tax, &cfg).unwrap();
        let b = datapipe::run_pipeline(&item.video_id, &item.video, &remote, &tax, &cfg).unwrap();
        assert_eq!(a.reject_reason, b.reject_reason, "{}", item.video_id);
        assert_eq!(a.label_set(), b.label_set(), "{}", item.video_id);
        *reasons.entry(b.reject_reason.as_str()).or_insert(0) += 1;
    }
    assert!(reasons.len() > 1);
}

#[test]
fn remote_encoders_round_trip_through_f32() {
    let local_img = ToyImageEncoder::new(4, 16, 3);
    let local_txt = ToyTextEncoder::new(24, 3);
    let (li, lt) = (local_img.clone(), local_txt.clone());
    let url = serve(move |req| {
        Some(match req.kind.as_str() {
            "image" => {
                let t = li.encode(&image_of(&req)).unwrap().tokens;
                Response::tensor(&t.data, vec![t.rows, t.cols])
            }
            "text" => {
                let t = lt
                    .encode(std::str::from_utf8(&req.payload().unwrap()).unwrap())
                    .unwrap();
                Response::tensor(&t.data, vec![t.rows, t.cols])
            }
            _ => return None,
        })
    });
    let img_enc = HttpImageEncoder {
        client: HttpClient::new(url.clone(), Duration::from_secs(10)),
        grid: 4,
        dim: 16,
    };
    let txt_enc = HttpTextEncoder {
        client: HttpClient::new(url, Duration::from_secs(10)),
        dim: 24,
    };
    let img = toydata::reference_image(Shape::Circle, Color::Red);
    let a = local_img.encode(&img).unwrap().tokens;
    let b = img_enc.encode(&img).unwrap().tokens;
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    assert!(a.max_abs_diff(&b) < 1e-6);
    let a = local_txt.encode("a red circle").unwrap();
    let b = txt_enc.encode("a red circle").unwrap();
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn malformed_and_failing_responses_are_errors() {
    let url = serve(|req| match req.kind.as_str() {
        // 3 values declared as 2x2
        "image" => Some(Response {
            tokens_b64: Response::tensor(&[1.0, 2.0, 3.0], vec![3]).tokens_b64,
            shape: vec![2, 2],
        }),
        "text" => Some(Response::tensor(&[1.0; 6], vec![2, 3])),
        _ => None,
    });
    let client = || HttpClient::new(url.clone(), Duration::from_secs(10));
    let img = Image::filled(4, 4, [0.5; 3]);
    let enc = HttpImageEncoder {
        client: client(),
        grid: 2,
        dim: 2,
    };
    assert!(enc.encode(&img).is_err());
    // width mismatch against the declared encoder dim
    let txt = HttpTextEncoder {
        client: client(),
        dim: 4,
    };
    assert!(txt.encode("x").is_err());
    // server error status
    let pipe = HttpPipelineBackend { client: client() };
    assert!(pipe.faces(&img).is_err());
    assert!(pipe.scores(&img, &["a".into()]).is_err());
}

#[test]
fn unreachable_server_is_an_error() {
    let probe = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", probe.local_addr().unwrap());
    drop(probe);
    let enc = HttpTextEncoder {
        client: HttpClient::new(url, Duration::from_millis(500)),
        dim: 4,
    };
    assert!(enc.encode("hello").is_err());
}
