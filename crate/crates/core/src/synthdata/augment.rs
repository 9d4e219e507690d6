//! Scale, rotate and crop-or-pad augmentation with matching annotation
//! transforms.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{intersection_area, Point, Polygon};
use crate::labelgen::InstanceAnnotation;

/// Gray used for padding; normalizes to roughly zero.
const PAD: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale: (f64, f64),
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Side of the square output.
    pub crop_size: usize,
    /// Probability of centering the crop on a random instance.
    pub recenter_probability: f64,
    /// Instances losing more than this fraction of their area are marked
    /// don't-care.
    pub dont_care_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (0.4, 1.7),
            rotation_deg: 10.0,
            crop_size: 640,
            recenter_probability: 0.5,
            dont_care_clip: 0.7,
        }
    }
}

/// One concrete draw: output = R(scale * p - c) + c - offset, with `c` the
/// center of the scaled image and `R` a rotation by `angle_deg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub angle_deg: f64,
    pub offset: (f64, f64),
}

struct Affine {
    s: f64,
    cos: f64,
    sin: f64,
    c: (f64, f64),
    o: (f64, f64),
}

impl Affine {
    fn new(p: &AugmentParams, w: u32, h: u32) -> Self {
        let a = p.angle_deg.to_radians();
        Self {
            s: p.scale,
            cos: a.cos(),
            sin: a.sin(),
            c: (0.5 * w as f64 * p.scale, 0.5 * h as f64 * p.scale),
            o: p.offset,
        }
    }

    fn forward(&self, p: Point) -> Point {
        let (x, y) = (self.s * p.x - self.c.0, self.s * p.y - self.c.1);
        Point::new(
            self.cos * x - self.sin * y + self.c.0 - self.o.0,
            self.sin * x + self.cos * y + self.c.1 - self.o.1,
        )
    }

    fn inverse(&self, q: Point) -> Point {
        let (x, y) = (q.x + self.o.0 - self.c.0, q.y + self.o.1 - self.c.1);
        let (rx, ry) = (self.cos * x + self.sin * y, -self.sin * x + self.cos * y);
        Point::new((rx + self.c.0) / self.s, (ry + self.c.1) / self.s)
    }
}

fn sample_bilinear(img: &RgbImage, p: Point) -> Rgb<u8> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h {
        return Rgb(PAD);
    }
    // pixel centers sit at half-integers
    let fx = (p.x - 0.5).clamp(0.0, w - 1.0);
    let fy = (p.y - 0.5).clamp(0.0, h - 1.0);
    let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let px = |x, y| img.get_pixel(x, y).0;
    let (a, b, c, d) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
    Rgb([0, 1, 2].map(|i| {
        let top = a[i] as f64 * (1.0 - tx) + b[i] as f64 * tx;
        let bot = c[i] as f64 * (1.0 - tx) + d[i] as f64 * tx;
        (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8
    }))
}

/// Applies `params` and crops to `crop x crop`. Instances whose anchor
/// point leaves the crop are dropped; those keeping less than
/// `1 - dont_care_clip` of their area are marked don't-care.
pub fn augment_with(
    image: &RgbImage,
    annos: &[InstanceAnnotation],
    params: &AugmentParams,
    crop: usize,
    dont_care_clip: f64,
) -> (RgbImage, Vec<InstanceAnnotation>) {
    let t = Affine::new(params, image.width(), image.height());
    let out = RgbImage::from_fn(crop as u32, crop as u32, |x, y| {
        sample_bilinear(image, t.inverse(Point::new(x as f64 + 0.5, y as f64 + 0.5)))
    });
    let size = crop as f64;
    let window = Polygon::rect(0.0, 0.0, size, size);
    let inside = |p: Point| p.x >= 0.0 && p.y >= 0.0 && p.x <= size && p.y <= size;
    let mut kept = Vec::new();
    for a in annos {
        let mut b = a.clone();
        b.polygon = a.polygon.as_ref().map(|p| p.map_points(|q| t.forward(q)));
        b.anchor = a.anchor.map(|q| t.forward(q));
        let Ok(center) = b.anchor_point() else {
            continue;
        };
        if !inside(center) {
            continue;
        }
        if let Some(p) = &b.polygon {
            let area = p.area();
            if area > 0.0 && intersection_area(p, &window) / area < 1.0 - dont_care_clip {
                b.care = false;
            }
        }
        kept.push(b);
    }
    (out, kept)
}

/// Draws random parameters from `cfg` and applies them.
pub fn augment(
    image: &RgbImage,
    annos: &[InstanceAnnotation],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (RgbImage, Vec<InstanceAnnotation>) {
    let scale = if cfg.scale.1 > cfg.scale.0 {
        rng.random_range(cfg.scale.0..=cfg.scale.1)
    } else {
        cfg.scale.0
    };
    let angle_deg = if cfg.rotation_deg > 0.0 {
        rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
    } else {
        0.0
    };
    let crop = cfg.crop_size as f64;
    let (sw, sh) = (image.width() as f64 * scale, image.height() as f64 * scale);
    let slack = |extent: f64| (extent - crop).max(0.0);
    let mut offset = (
        rng.random_range(0.0..=slack(sw)),
        rng.random_range(0.0..=slack(sh)),
    );
    if !annos.is_empty() && rng.random_bool(cfg.recenter_probability) {
        let probe = AugmentParams {
            scale,
            angle_deg,
            offset: (0.0, 0.0),
        };
        let t = Affine::new(&probe, image.width(), image.height());
        let pick = &annos[rng.random_range(0..annos.len())];
        if let Ok(a) = pick.anchor_point() {
            let c = t.forward(a);
            let jitter = 0.25 * crop;
            let ox = c.x - 0.5 * crop + rng.random_range(-jitter..=jitter);
            let oy = c.y - 0.5 * crop + rng.random_range(-jitter..=jitter);
            offset = (ox.clamp(0.0, slack(sw)), oy.clamp(0.0, slack(sh)));
        }
    }
    let params = AugmentParams {
        scale,
        angle_deg,
        offset,
    };
    augment_with(image, annos, &params, cfg.crop_size, cfg.dont_care_clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fixture() -> (RgbImage, Vec<InstanceAnnotation>) {
        let img = RgbImage::from_fn(64, 64, |x, y| Rgb([(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8]));
        let annos = vec![
            InstanceAnnotation::with_polygon(Polygon::rect(10.0, 10.0, 40.0, 20.0), "ab"),
            InstanceAnnotation::weak(Point::new(30.0, 50.0), "c"),
        ];
        (img, annos)
    }

    #[test]
    fn identity_is_a_no_op() {
        let (img, annos) = fixture();
        let id = AugmentParams {
            scale: 1.0,
            angle_deg: 0.0,
            offset: (0.0, 0.0),
        };
        let (out, a) = augment_with(&img, &annos, &id, 64, 0.7);
        assert_eq!(out, img);
        assert_eq!(a, annos);
    }

    #[test]
    fn scaling_by_two_doubles_coordinates() {
        let (img, annos) = fixture();
        let p = AugmentParams {
            scale: 2.0,
            angle_deg: 0.0,
            offset: (0.0, 0.0),
        };
        let (_, a) = augment_with(&img, &annos, &p, 128, 0.7);
        let doubled = annos[0].polygon.as_ref().unwrap().map_points(|q| Point::new(2.0 * q.x, 2.0 * q.y));
        let got = a[0].polygon.as_ref().unwrap();
        for (u, v) in got.vertices.iter().zip(&doubled.vertices) {
            assert!((u.x - v.x).abs() < 1e-9 && (u.y - v.y).abs() < 1e-9);
        }
        let anchor = a[1].anchor.unwrap();
        assert!((anchor.x - 60.0).abs() < 1e-9 && (anchor.y - 100.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_is_an_isometry() {
        let (img, annos) = fixture();
        let p = AugmentParams {
            scale: 1.0,
            angle_deg: 10.0,
            offset: (0.0, 0.0),
        };
        let (_, a) = augment_with(&img, &annos, &p, 64, 0.7);
        let (before, after) = (&annos[0].polygon.as_ref().unwrap().vertices, &a[0].polygon.as_ref().unwrap().vertices);
        for i in 0..4 {
            for j in 0..4 {
                let d0 = (before[i].x - before[j].x).hypot(before[i].y - before[j].y);
                let d1 = (after[i].x - after[j].x).hypot(after[i].y - after[j].y);
                assert!((d0 - d1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn crops_drop_and_flag_instances() {
        let (img, annos) = fixture();
        // window [24, 56) x [0, 32): the box keeps 16/30 of its area and its
        // centre, the weak anchor at y = 50 leaves
        let p = AugmentParams {
            scale: 1.0,
            angle_deg: 0.0,
            offset: (24.0, 0.0),
        };
        let (_, a) = augment_with(&img, &annos, &p, 32, 0.4);
        assert_eq!(a.len(), 1);
        assert!(!a[0].care);
    }

    #[test]
    fn random_augment_is_reproducible() {
        let (img, annos) = fixture();
        let cfg = AugmentConfig {
            crop_size: 48,
            ..AugmentConfig::default()
        };
        let run = || augment(&img, &annos, &cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        assert_eq!(run(), run());
        assert_eq!(run().0.dimensions(), (48, 48));
    }
}
