use std::f64::consts::PI;

use mcvc_core::evalbench::{detect_regions, AttributeDetector, ColorRead};
use mcvc_core::toydata::*;
use mcvc_core::video::Video;
use mcvc_core::vision::BoundingBox;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn still(shape: Shape, color: Color, size: f64, at: [f64; 2]) -> ConceptSpec {
    ConceptSpec {
        shape,
        color,
        size,
        trajectory: Trajectory::Linear {
            start: at,
            velocity: [0.0, 0.0],
        },
    }
}

fn scene(concepts: Vec<ConceptSpec>, side: usize, frames: usize) -> SceneSpec {
    SceneSpec {
        frames,
        height: side,
        width: side,
        concepts,
        background_seed: 3,
        caption_template: 0,
    }
}

fn count_color(video: &Video, f: usize, rgb: [f64; 3]) -> usize {
    video.frame(f).data.chunks_exact(3).filter(|p| p == &rgb).count()
}

#[test]
fn twenty_pixel_circle_area_matches_formula() {
    let spec = scene(vec![still(Shape::Circle, Color::Red, 20.0, [24.0, 24.0])], 48, 2);
    let v = render_video(&spec);
    let want = PI * 10.0 * 10.0;
    for f in 0..2 {
        let got = count_color(&v, f, Color::Red.rgb()) as f64;
        assert!((got - want).abs() / want <= 0.02, "frame {f}: {got} px vs {want:.1}");
    }
}

#[test]
fn painted_pixels_stay_inside_oracle_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let spec = gen_scene(&mut rng, 2).unwrap();
        let v = render_video(&spec);
        for f in 0..spec.frames {
            let img = v.frame(f);
            for c in &spec.concepts {
                let boxes: Vec<_> = spec
                    .concepts
                    .iter()
                    .filter(|o| o.color == c.color)
                    .map(|o| o.box_at(f))
                    .collect();
                for y in 0..img.height {
                    for x in 0..img.width {
                        if img.pixel(y, x) == c.color.rgb() {
                            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                            assert!(boxes
                                .iter()
                                .any(|b| px >= b.x0 && px <= b.x1 && py >= b.y0 && py <= b.y1));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn seeded_scenes_never_repeat_a_concept() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let spec = gen_scene(&mut rng, 3).unwrap();
        let mut seen: Vec<_> = spec.concepts.iter().map(|c| (c.shape, c.color)).collect();
        seen.sort_by_key(|p| (p.0.name(), p.1.name()));
        seen.dedup();
        assert_eq!(seen.len(), 3);
    }
}

#[test]
fn detected_boxes_track_oracle_boxes() {
    let det = AttributeDetector::default();
    let mut checked = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = gen_scene(&mut rng, 2).unwrap();
        let video = render_video(&spec);
        let regions = detect_regions(&det, &video, &spec.labels()).unwrap();
        for f in 0..spec.frames {
            let oracle = oracle_locate(&spec, f).unwrap();
            for (i, b) in &oracle {
                // closing bridges same-color gaps of up to two pixel rows
                let grown = BoundingBox::new(b.x0 - 3.0, b.y0 - 3.0, b.x1 + 3.0, b.y1 + 3.0, 1.0, "");
                let color = spec.concepts[*i].color;
                if oracle.iter().any(|(j, o)| {
                    j != i && (o.iou(b) > 0.0 || (spec.concepts[*j].color == color && o.iou(&grown) > 0.0))
                }) {
                    continue;
                }
                let r = regions[f]
                    .iter()
                    .filter(|r| r.color == ColorRead::Pure(color))
                    .max_by(|a, c| a.bbox.iou(b).total_cmp(&c.bbox.iou(b)))
                    .unwrap_or_else(|| panic!("seed {seed} frame {f}: {color:?} not detected"));
                let d = [r.bbox.x0 - b.x0, r.bbox.y0 - b.y0, r.bbox.x1 - b.x1, r.bbox.y1 - b.y1];
                assert!(d.iter().all(|e| e.abs() <= 3.0), "seed {seed} frame {f}: {d:?}");
                checked += 1;
            }
        }
    }
    assert!(checked > 500, "only {checked} separated boxes");
}

#[test]
fn blank_and_two_shape_frames() {
    let det = AttributeDetector::default();
    let blank = Video::zeros(1, 16, 16, 3);
    assert!(detect_regions(&det, &blank, &[]).unwrap()[0].is_empty());

    let spec = scene(
        vec![
            still(Shape::Square, Color::Blue, 8.0, [8.0, 8.0]),
            still(Shape::Circle, Color::Yellow, 10.0, [24.0, 24.0]),
        ],
        32,
        1,
    );
    let regions = detect_regions(&det, &render_video(&spec), &spec.labels()).unwrap();
    assert_eq!(regions[0].len(), 2);
    let mut labels: Vec<_> = regions[0].iter().map(|r| r.bbox.label.clone()).collect();
    labels.sort();
    assert_eq!(labels, ["blue square", "yellow circle"]);
}
