use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_cross_mut, draw_filled_circle_mut, draw_line_segment_mut};

use crate::geometry::Point;
use crate::inference::{AnchorTrace, SpotResult};
use crate::synthdata::{glyph, GLYPH_HEIGHT, GLYPH_WIDTH};

const POLYGON: Rgb<u8> = Rgb([255, 40, 40]);
const ANCHOR: Rgb<u8> = Rgb([0, 220, 0]);
const SAMPLE: Rgb<u8> = Rgb([30, 80, 255]);
const TEXT: Rgb<u8> = Rgb([255, 220, 0]);
/// Cap height of drawn transcriptions, in pixels.
const LABEL_HEIGHT: f64 = 12.0;

fn line(img: &mut RgbImage, a: Point, b: Point, color: Rgb<u8>) {
    draw_line_segment_mut(img, (a.x as f32, a.y as f32), (b.x as f32, b.y as f32), color);
}

/// Draws `text` with the synthetic stroke font, cap line at `origin`.
fn draw_label(img: &mut RgbImage, text: &str, origin: Point) {
    let unit = LABEL_HEIGHT / GLYPH_HEIGHT;
    let advance = (GLYPH_WIDTH + 1.5) * unit;
    for (i, c) in text.chars().enumerate() {
        let Some(strokes) = glyph(c) else { continue };
        let x0 = origin.x + i as f64 * advance;
        for stroke in strokes {
            for w in stroke.windows(2) {
                let p = |(gx, gy): (f64, f64)| Point::new(x0 + gx * unit, origin.y + gy * unit);
                line(img, p(w[0]), p(w[1]), TEXT);
            }
        }
    }
}

/// Draws each result's polygon and transcription and, when `traces` are
/// given, a green cross at its anchor and a blue dot at every sampled point.
pub fn render_overlay(image: &RgbImage, result: &SpotResult, traces: Option<&[AnchorTrace]>) -> RgbImage {
    let mut out = image.clone();
    for word in &result.results {
        let v = &word.polygon.vertices;
        for i in 0..v.len() {
            line(&mut out, v[i], v[(i + 1) % v.len()], POLYGON);
        }
        if let Some(top_left) = v.iter().copied().reduce(|a, b| Point::new(a.x.min(b.x), a.y.min(b.y))) {
            draw_label(&mut out, &word.text, Point::new(top_left.x, top_left.y - LABEL_HEIGHT - 2.0));
        }
    }
    for t in traces.unwrap_or_default() {
        for s in &t.samples {
            draw_filled_circle_mut(&mut out, (s.x.round() as i32, s.y.round() as i32), 1, SAMPLE);
        }
        draw_cross_mut(&mut out, ANCHOR, t.anchor.x.round() as i32, t.anchor.y.round() as i32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;
    use crate::inference::SpottedWord;

    fn result(words: Vec<SpottedWord>) -> SpotResult {
        SpotResult {
            image: "x.png".into(),
            results: words,
        }
    }

    #[test]
    fn empty_result_leaves_the_image_alone() {
        let img = RgbImage::from_pixel(40, 30, Rgb([9, 9, 9]));
        assert_eq!(render_overlay(&img, &result(Vec::new()), Some(&[])), img);
    }

    #[test]
    fn one_word_draws_every_sample_point() {
        let img = RgbImage::from_pixel(200, 100, Rgb([0, 0, 0]));
        // 25 points spaced 6 px apart along the center line
        let samples: Vec<Point> = (0..25).map(|i| Point::new(28.0 + 6.0 * i as f64, 55.0)).collect();
        let traces = [AnchorTrace {
            anchor: Point::new(100.0, 62.0),
            samples: samples.clone(),
        }];
        let out = render_overlay(&img, &result(vec![word()]), Some(&traces));
        let dots = samples
            .iter()
            .filter(|p| *out.get_pixel(p.x as u32, p.y as u32) == SAMPLE)
            .count();
        assert_eq!(dots, 25);
        assert_eq!(*out.get_pixel(100, 62), ANCHOR);
        assert_eq!(*out.get_pixel(20, 40), POLYGON);
        assert!(out.pixels().any(|p| *p == TEXT));
        assert_eq!(out, render_overlay(&img, &result(vec![word()]), Some(&traces)));
    }

    fn word() -> SpottedWord {
        SpottedWord {
            polygon: Polygon::rect(20.0, 40.0, 180.0, 70.0),
            text: "open".into(),
            score: 0.9,
        }
    }
}
