//! Deterministic synthetic scenes: 1-4 colored shapes (circle, square,
//! triangle) on a two-tone checkered background, with analytically exact
//! masks and tight boxes. Shape kind doubles as the category label
//! (0 = circle, 1 = square, 2 = triangle).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::{GrayMask, ObjectSet, Raster};
use crate::seeds::child_seed;

pub const N_CATEGORIES: usize = 3;

/// One rendered scene and its exact object annotations.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub raster: Raster,
    pub objects: ObjectSet,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Square { cx: f64, cy: f64, half: f64 },
    Triangle { cx: f64, cy: f64, half_w: f64, half_h: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (px, py) = (x as f64, y as f64);
        match *self {
            Shape::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Square { cx, cy, half } => (px - cx).abs() <= half && (py - cy).abs() <= half,
            Shape::Triangle { cx, cy, half_w, half_h } => {
                // isoceles: apex up, base down
                let dy = py - (cy - half_h);
                if !(0.0..=2.0 * half_h).contains(&dy) {
                    return false;
                }
                let spread = half_w * (dy / (2.0 * half_h));
                (px - cx).abs() <= spread
            }
        }
    }

    fn mask(&self, height: usize, width: usize) -> GrayMask {
        GrayMask::from_fn(height, width, |y, x| self.contains(y, x))
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, category: usize, size: usize) -> Shape {
    let s = size as f64;
    let scale = s / 10.0 + rng.random::<f64>() * s / 10.0; // radius-like extent in [s/10, s/5)
    let margin = scale + 1.0;
    let cx = margin + rng.random::<f64>() * (s - 2.0 * margin).max(1.0);
    let cy = margin + rng.random::<f64>() * (s - 2.0 * margin).max(1.0);
    match category {
        0 => Shape::Circle { cx, cy, r: scale },
        1 => Shape::Square { cx, cy, half: scale * 0.8 },
        _ => Shape::Triangle { cx, cy, half_w: scale, half_h: scale },
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Random color whose hue clusters by category. Color is the source
/// domain's object-attribute confounder: it correlates with the category
/// in the generated scenes, and the photometric augmentations perturb it.
fn category_color(rng: &mut ChaCha8Rng, category: usize) -> [f64; 3] {
    let hue = (category as f64 / N_CATEGORIES as f64 + 0.16 * (rng.random::<f64>() - 0.5)).rem_euclid(1.0);
    let saturation = 0.6 + 0.4 * rng.random::<f64>();
    let value = 0.5 + 0.5 * rng.random::<f64>();
    let (r, g, b) = crate::localaug::hsv_to_rgb(hue, saturation, value);
    [r, g, b]
}

fn generate_scene(seed: u64, index: usize, size: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tone_a = random_color(&mut rng);
    let tone_b = random_color(&mut rng);
    let tile = (size / 8).max(2);
    let mut raster = Raster::from_fn(size, size, |y, x, c| {
        if (y / tile + x / tile) % 2 == 0 {
            tone_a[c]
        } else {
            tone_b[c]
        }
    });

    let n_objects = rng.random_range(1..=4usize);
    let mut masks: Vec<GrayMask> = Vec::new();
    let mut boxes = Vec::new();
    let mut categories = Vec::new();
    let mut colors = Vec::new();
    for k in 0..n_objects {
        // the first object's category cycles with the scene index so every
        // category appears across a scene set
        let category = if k == 0 {
            index % N_CATEGORIES
        } else {
            rng.random_range(0..N_CATEGORIES)
        };
        let color = category_color(&mut rng, category);
        for _attempt in 0..20 {
            let shape = sample_shape(&mut rng, category, size);
            let mask = shape.mask(size, size);
            let Some(bbox) = mask.bounding_box() else { continue };
            if masks.iter().all(|m: &GrayMask| m.is_disjoint(&mask)) {
                masks.push(mask);
                boxes.push(bbox);
                categories.push(category);
                colors.push(color);
                break;
            }
        }
    }

    // render shapes opaquely over the background
    let data: Vec<f64> = (0..size * size * Raster::CHANNELS)
        .map(|i| {
            let (pix, c) = (i / Raster::CHANNELS, i % Raster::CHANNELS);
            let (y, x) = (pix / size, pix % size);
            for (m, color) in masks.iter().zip(&colors) {
                if m.get(y, x) == 1 {
                    return color[c];
                }
            }
            raster.get(y, x, c)
        })
        .collect();
    raster = Raster::from_data(size, size, data).expect("scene values are in range");

    let objects = ObjectSet::from_parts(masks, boxes, categories).expect("scene annotations are consistent");
    SyntheticScene { raster, objects }
}

const SCENE_TAG: u64 = 0x5343_454e; // "SCEN"

/// Deterministic scene set; scene `i` draws from `child_seed(seed, SCENE_TAG + i)`.
/// Placement retries guarantee at least one object per scene.
pub fn gen_scenes(seed: u64, n: usize, size: usize) -> Vec<SyntheticScene> {
    assert!(n >= 1, "need at least one scene");
    assert!(size >= 16, "scenes below 16x16 cannot place shapes");
    (0..n)
        .map(|i| {
            let mut scene_seed = child_seed(seed, SCENE_TAG + i as u64);
            loop {
                let scene = generate_scene(scene_seed, i, size);
                if !scene.objects.is_empty() {
                    return scene;
                }
                // placement starved; reroll deterministically
                scene_seed = child_seed(scene_seed, SCENE_TAG);
            }
        })
        .collect()
}

/// ROI specs straight from a scene's ground-truth boxes.
pub fn scene_rois(scene: &SyntheticScene) -> Vec<crate::gradcore::RoiSpec> {
    scene
        .objects
        .boxes()
        .iter()
        .zip(scene.objects.categories())
        .map(|(&rect, &label)| crate::gradcore::RoiSpec { rect, label })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::disjointify;

    #[test]
    fn scenes_are_deterministic() {
        let a = gen_scenes(7, 4, 32);
        let b = gen_scenes(7, 4, 32);
        assert_eq!(a.len(), b.len());
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.raster.data(), sb.raster.data());
            assert_eq!(sa.objects.categories(), sb.objects.categories());
        }
    }

    #[test]
    fn every_scene_has_objects_with_valid_annotations() {
        for scene in gen_scenes(3, 6, 32) {
            assert!(!scene.objects.is_empty());
            assert!(scene.objects.len() <= 4);
            for &c in scene.objects.categories() {
                assert!(c < N_CATEGORIES);
            }
            for (m, b) in scene.objects.masks().iter().zip(scene.objects.boxes()) {
                assert_eq!(m.bounding_box().unwrap(), *b, "boxes are tight");
                assert!(m.count_ones() > 0);
            }
        }
    }

    #[test]
    fn single_32x32_scene_mask_matches_rendered_pixels() {
        let scenes = gen_scenes(11, 1, 32);
        let scene = &scenes[0];
        // every masked pixel carries one constant shape color
        for (k, m) in scene.objects.masks().iter().enumerate() {
            let mut color = None;
            for y in 0..32 {
                for x in 0..32 {
                    if m.get(y, x) == 1 {
                        let px = [
                            scene.raster.get(y, x, 0),
                            scene.raster.get(y, x, 1),
                            scene.raster.get(y, x, 2),
                        ];
                        match color {
                            None => color = Some(px),
                            Some(c) => assert_eq!(c, px, "object {k} not uniformly colored"),
                        }
                    }
                }
            }
            assert!(color.is_some());
        }
    }

    #[test]
    fn masks_are_disjoint_by_construction() {
        for scene in gen_scenes(5, 8, 32) {
            let dj = disjointify(&scene.objects);
            for (a, b) in scene.objects.masks().iter().zip(dj.masks()) {
                assert_eq!(a, b, "disjointify must be a no-op");
            }
        }
    }

    #[test]
    fn categories_cover_all_three_across_a_set() {
        let scenes = gen_scenes(0, 6, 32);
        let mut seen = [false; N_CATEGORIES];
        for s in &scenes {
            for &c in s.objects.categories() {
                seen[c] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "seen: {seen:?}");
    }
}
