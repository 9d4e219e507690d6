use anchorspot::geometry::rasterize;
use anchorspot::labelgen::InstanceAnnotation;
use anchorspot::synthdata::{augment_with, ink_mask, render_sample_with_layouts, AugmentParams, SynthConfig};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Glyph pixels pushed through an augmentation stay inside the polygons
/// pushed through the same map.
#[test]
fn augmentation_keeps_annotations_registered() {
    let cfg = SynthConfig {
        image_size: 256,
        ..SynthConfig::default()
    };
    let crop = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut ink, mut covered) = (0usize, 0usize);
    for index in 0..40 {
        let (_, layouts) = render_sample_with_layouts(&cfg, index);
        let params = AugmentParams {
            scale: rng.random_range(0.6..1.6),
            angle_deg: rng.random_range(-10.0..10.0),
            offset: (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)),
        };
        for layout in &layouts {
            let mask = ink_mask(layout, cfg.image_size, cfg.image_size);
            let img = RgbImage::from_fn(cfg.image_size as u32, cfg.image_size as u32, |x, y| {
                let v = if mask.get(x as usize, y as usize) { 255 } else { 0 };
                Rgb([v, v, v])
            });
            let anno = InstanceAnnotation::with_polygon(layout.polygon(), layout.text.clone());
            let (warped, kept) = augment_with(&img, &[anno], &params, crop, 0.7);
            let Some(poly) = kept.first().and_then(|a| a.polygon.clone()) else {
                continue;
            };
            let inside = rasterize(&poly, crop, crop, 1.0);
            for (x, y, p) in warped.enumerate_pixels() {
                // padding is mid-gray, so ink must be brighter than it
                if p.0[0] >= 192 {
                    ink += 1;
                    covered += inside.get(x as usize, y as usize) as usize;
                }
            }
        }
    }
    assert!(ink > 10_000, "too little ink to judge: {ink}");
    let ratio = covered as f64 / ink as f64;
    assert!(ratio >= 0.95, "coverage {ratio:.4}");
}
