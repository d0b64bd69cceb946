//! Synthetic blob scenes: colored deformed ellipsoids (circles traced by
//! four cubic Bézier segments with jittered control points) over a
//! procedural or image-derived background, with tight box annotations and
//! a cap on pairwise overlap.

use super::pnm::{read_pnm, Image};
use super::DataError;
use crate::geom::{iou, Rect};
use crate::rng::Rng;
use std::path::PathBuf;

pub const SHAPE_COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.85, 0.13, 0.11]),
    ("green", [0.18, 0.72, 0.22]),
    ("yellow", [0.92, 0.86, 0.12]),
    ("blue", [0.15, 0.30, 0.88]),
];

#[derive(Clone, Debug)]
pub enum BackgroundMode {
    /// Low-frequency color noise.
    Procedural,
    /// Random crops from user-supplied P5/P6 images in a directory.
    ImageDir(PathBuf),
}

#[derive(Clone, Debug)]
pub struct ShapeSceneConfig {
    pub width: usize,
    pub height: usize,
    pub count_min: usize,
    pub count_max: usize,
    /// Blob radius range as a fraction of the smaller image side.
    pub radius_min_frac: f64,
    pub radius_max_frac: f64,
    /// Largest allowed IoU between any two annotation boxes.
    pub max_pair_iou: f64,
    /// Standard deviation of the additive Gaussian pixel noise, in [0,1]
    /// intensity units.
    pub noise_sigma: f64,
    pub background: BackgroundMode,
    /// Sample colors without replacement and list annotations in canonical
    /// color order; requires count_max <= 4. Used for the identification
    /// experiment where the color is the instance identity.
    pub distinct_colors: bool,
}

impl Default for ShapeSceneConfig {
    fn default() -> Self {
        ShapeSceneConfig {
            width: 64,
            height: 64,
            count_min: 0,
            count_max: 4,
            // 25..50 px on the 200 px reference scale
            radius_min_frac: 0.125,
            radius_max_frac: 0.25,
            max_pair_iou: 0.85,
            noise_sigma: 0.02,
            background: BackgroundMode::Procedural,
            distinct_colors: false,
        }
    }
}

impl ShapeSceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.width < 16 || self.height < 16 {
            return Err(DataError::Config("image side must be at least 16".into()));
        }
        if self.count_min > self.count_max {
            return Err(DataError::Config("count_min exceeds count_max".into()));
        }
        if !(self.max_pair_iou > 0.0 && self.max_pair_iou <= 1.0) {
            return Err(DataError::Config("max_pair_iou must lie in (0, 1]".into()));
        }
        if !(self.radius_min_frac > 0.0 && self.radius_min_frac <= self.radius_max_frac) {
            return Err(DataError::Config("bad radius range".into()));
        }
        if self.radius_max_frac > 0.35 {
            return Err(DataError::Config("radius_max_frac must not exceed 0.35".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::Config("noise_sigma must be nonnegative".into()));
        }
        if self.distinct_colors && self.count_max > SHAPE_COLORS.len() {
            return Err(DataError::Config(format!(
                "distinct_colors supports at most {} objects",
                SHAPE_COLORS.len()
            )));
        }
        Ok(())
    }
}

/// One generated scene: the rendered image plus its annotation set in
/// annotation order (boxes normalized, identity = color name).
#[derive(Clone, Debug)]
pub struct ShapeScene {
    pub image: Image,
    pub boxes: Vec<Rect>,
    pub identities: Vec<String>,
}

/// Rasterized blob: pixel mask with its tight bounds.
pub(crate) struct BlobMask {
    pub data: Vec<bool>,
    /// Inclusive pixel bounds (x0, y0, x1, y1).
    pub bounds: (usize, usize, usize, usize),
}

const BEZIER_CIRCLE_HANDLE: f64 = 0.552_284_749_830_793_4;
const FLATTEN_STEPS: usize = 24;

fn cubic_point(p0: (f64, f64), c1: (f64, f64), c2: (f64, f64), p3: (f64, f64), t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p0.0 + b * c1.0 + c * c2.0 + d * p3.0,
        a * p0.1 + b * c1.1 + c * c2.1 + d * p3.1,
    )
}

/// Closed polygon approximating a circle of radius `r` at (cx, cy): four
/// cubic segments with every control point (endpoints and handles) jittered
/// by up to `jitter_frac * r` per coordinate.
pub(crate) fn blob_outline(
    cx: f64,
    cy: f64,
    r: f64,
    jitter_frac: f64,
    rng: &mut Rng,
) -> Vec<(f64, f64)> {
    let k = BEZIER_CIRCLE_HANDLE * r;
    // endpoints at the four compass points, two handles per segment
    let endpoints = [(r, 0.0), (0.0, r), (-r, 0.0), (0.0, -r)];
    let handles = [
        [(r, k), (k, r)],
        [(-k, r), (-r, k)],
        [(-r, -k), (-k, -r)],
        [(k, -r), (r, -k)],
    ];
    let mut jitter = |p: (f64, f64)| {
        (
            cx + p.0 + rng.range_f64(-jitter_frac * r, jitter_frac * r),
            cy + p.1 + rng.range_f64(-jitter_frac * r, jitter_frac * r),
        )
    };
    let pts: Vec<(f64, f64)> = endpoints.iter().map(|&p| jitter(p)).collect();
    let hnd: Vec<[(f64, f64); 2]> = handles.iter().map(|h| [jitter(h[0]), jitter(h[1])]).collect();

    let mut poly = Vec::with_capacity(4 * FLATTEN_STEPS);
    for seg in 0..4 {
        let p0 = pts[seg];
        let p3 = pts[(seg + 1) % 4];
        let [c1, c2] = hnd[seg];
        for step in 0..FLATTEN_STEPS {
            let t = step as f64 / FLATTEN_STEPS as f64;
            poly.push(cubic_point(p0, c1, c2, p3, t));
        }
    }
    poly
}

/// Even-odd scanline fill sampled at pixel centers.
pub(crate) fn fill_polygon(poly: &[(f64, f64)], width: usize, height: usize) -> Option<BlobMask> {
    let mut data = vec![false; width * height];
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for y in 0..height {
        let yc = y as f64 + 0.5;
        let mut crossings = Vec::new();
        for i in 0..poly.len() {
            let (x1, y1) = poly[i];
            let (x2, y2) = poly[(i + 1) % poly.len()];
            if (y1 <= yc && yc < y2) || (y2 <= yc && yc < y1) {
                crossings.push(x1 + (yc - y1) / (y2 - y1) * (x2 - x1));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in crossings.chunks_exact(2) {
            let x_start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let x_end = (pair[1] - 0.5).floor().min(width as f64 - 1.0);
            if x_end < 0.0 {
                continue;
            }
            for x in x_start..=x_end as usize {
                data[y * width + x] = true;
                bounds = Some(match bounds {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    bounds.map(|bounds| BlobMask { data, bounds })
}

impl BlobMask {
    pub fn rect_normalized(&self, width: usize, height: usize) -> Rect {
        let (x0, y0, x1, y1) = self.bounds;
        Rect::new(
            x0 as f64 / width as f64,
            y0 as f64 / height as f64,
            (x1 - x0 + 1) as f64 / width as f64,
            (y1 - y0 + 1) as f64 / height as f64,
        )
    }
}

fn procedural_background(width: usize, height: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    // coarse random color grid, bilinearly upsampled
    let cells = 5usize;
    let mut grid = vec![[0.0f64; 3]; (cells + 1) * (cells + 1)];
    for cell in grid.iter_mut() {
        for c in cell.iter_mut() {
            *c = rng.range_f64(0.28, 0.48);
        }
    }
    let mut out = vec![[0.0f64; 3]; width * height];
    for y in 0..height {
        let fy = y as f64 / height as f64 * cells as f64;
        let (gy, ty) = (fy as usize, fy.fract());
        for x in 0..width {
            let fx = x as f64 / width as f64 * cells as f64;
            let (gx, tx) = (fx as usize, fx.fract());
            let idx = |xx: usize, yy: usize| grid[yy * (cells + 1) + xx];
            let (a, b, c, d) = (idx(gx, gy), idx(gx + 1, gy), idx(gx, gy + 1), idx(gx + 1, gy + 1));
            for ch in 0..3 {
                let top = a[ch] * (1.0 - tx) + b[ch] * tx;
                let bot = c[ch] * (1.0 - tx) + d[ch] * tx;
                out[y * width + x][ch] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn background_from_dir(dir: &PathBuf, width: usize, height: usize, rng: &mut Rng) -> Result<Vec<[f64; 3]>, DataError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(DataError::Io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("pgm") | Some("pnm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::Config(format!("no P5/P6 images in {}", dir.display())));
    }
    let img = read_pnm(&files[rng.below(files.len())])?;
    // random crop if large enough, else nearest resize
    let (ox, oy, sx, sy) = if img.width >= width && img.height >= height {
        (
            rng.below(img.width - width + 1),
            rng.below(img.height - height + 1),
            1.0,
            1.0,
        )
    } else {
        (0, 0, img.width as f64 / width as f64, img.height as f64 / height as f64)
    };
    let mut out = vec![[0.0f64; 3]; width * height];
    for y in 0..height {
        for x in 0..width {
            let px = ((x as f64 * sx) as usize + ox).min(img.width - 1);
            let py = ((y as f64 * sy) as usize + oy).min(img.height - 1);
            for ch in 0..3 {
                let v = img.get(px, py, ch.min(img.channels - 1)) as f64 / 255.0;
                out[y * width + x][ch] = v;
            }
        }
    }
    Ok(out)
}

const PLACEMENT_ATTEMPTS: usize = 1000;
const REGENERATION_LIMIT: usize = 64;

pub fn gen_shape_scene(config: &ShapeSceneConfig, rng: &mut Rng) -> Result<ShapeScene, DataError> {
    config.validate()?;
    let (width, height) = (config.width, config.height);
    let min_side = width.min(height) as f64;

    // place blobs; on placement failure resample the object count
    let mut placed: Option<(Vec<BlobMask>, Vec<Rect>)> = None;
    for _ in 0..REGENERATION_LIMIT {
        let count = rng.range_usize(config.count_min, config.count_max);
        let mut masks: Vec<BlobMask> = Vec::with_capacity(count);
        let mut rects: Vec<Rect> = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while masks.len() < count && attempts < PLACEMENT_ATTEMPTS {
            attempts += 1;
            let r = rng.range_f64(config.radius_min_frac, config.radius_max_frac) * min_side;
            let margin = 1.35 * r;
            if 2.0 * margin >= width as f64 || 2.0 * margin >= height as f64 {
                continue;
            }
            let cx = rng.range_f64(margin, width as f64 - margin);
            let cy = rng.range_f64(margin, height as f64 - margin);
            let poly = blob_outline(cx, cy, r, 0.2, rng);
            let Some(mask) = fill_polygon(&poly, width, height) else {
                continue;
            };
            let rect = mask.rect_normalized(width, height);
            if rects.iter().any(|other| iou(&rect, other) > config.max_pair_iou) {
                continue;
            }
            masks.push(mask);
            rects.push(rect);
        }
        if masks.len() == count {
            placed = Some((masks, rects));
            break;
        }
    }
    let (masks, rects) =
        placed.ok_or_else(|| DataError::Generation("blob placement failed repeatedly".into()))?;
    let count = masks.len();

    // colors: distinct (identity experiment) or independent draws
    let color_indices: Vec<usize> = if config.distinct_colors {
        let mut all: Vec<usize> = (0..SHAPE_COLORS.len()).collect();
        rng.shuffle(&mut all);
        all.truncate(count);
        all
    } else {
        (0..count).map(|_| rng.below(SHAPE_COLORS.len())).collect()
    };

    // render: background, blobs in placement order, then pixel noise
    let mut canvas = match &config.background {
        BackgroundMode::Procedural => procedural_background(width, height, rng),
        BackgroundMode::ImageDir(dir) => background_from_dir(dir, width, height, rng)?,
    };
    for (mask, &color_idx) in masks.iter().zip(color_indices.iter()) {
        let base = SHAPE_COLORS[color_idx].1;
        let brightness = rng.range_f64(0.75, 1.05);
        let mut tone = [0.0f64; 3];
        for ch in 0..3 {
            tone[ch] = (base[ch] * brightness + rng.range_f64(-0.06, 0.06)).clamp(0.0, 1.0);
        }
        for (i, &inside) in mask.data.iter().enumerate() {
            if inside {
                canvas[i] = tone;
            }
        }
    }
    let mut image = Image::new(width, height, 3);
    for (i, px) in canvas.iter().enumerate() {
        for ch in 0..3 {
            let v = (px[ch] + config.noise_sigma * rng.normal()).clamp(0.0, 1.0);
            image.pixels[i * 3 + ch] = (v * 255.0).round() as u8;
        }
    }

    // annotation order: canonical color order when identities are distinct,
    // otherwise an order unrelated to drawing order
    let mut order: Vec<usize> = (0..count).collect();
    if config.distinct_colors {
        order.sort_by_key(|&i| color_indices[i]);
    } else {
        rng.shuffle(&mut order);
    }
    let boxes: Vec<Rect> = order.iter().map(|&i| rects[i]).collect();
    let identities: Vec<String> = order
        .iter()
        .map(|&i| SHAPE_COLORS[color_indices[i]].0.to_string())
        .collect();

    Ok(ShapeScene { image, boxes, identities })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_range_gives_background_only() {
        let config = ShapeSceneConfig { count_min: 0, count_max: 0, ..Default::default() };
        let scene = gen_shape_scene(&config, &mut Rng::new(1)).unwrap();
        assert!(scene.boxes.is_empty());
        assert!(scene.identities.is_empty());
        assert_eq!(scene.image.width, 64);
    }

    #[test]
    fn pairwise_iou_respects_cap() {
        let config = ShapeSceneConfig { count_min: 2, count_max: 4, max_pair_iou: 0.3, ..Default::default() };
        let mut rng = Rng::new(2);
        for _ in 0..30 {
            let scene = gen_shape_scene(&config, &mut rng).unwrap();
            for i in 0..scene.boxes.len() {
                for j in i + 1..scene.boxes.len() {
                    let overlap = iou(&scene.boxes[i], &scene.boxes[j]);
                    assert!(overlap <= 0.3 + 1e-12, "IoU {overlap}");
                }
            }
        }
    }

    #[test]
    fn boxes_are_tight_around_masks() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let r = rng.range_f64(6.0, 14.0);
            let poly = blob_outline(24.0, 24.0, r, 0.2, &mut rng);
            let Some(mask) = fill_polygon(&poly, 48, 48) else {
                panic!("degenerate blob");
            };
            let (x0, y0, x1, y1) = mask.bounds;
            // every lit pixel inside the box
            for y in 0..48 {
                for x in 0..48 {
                    if mask.data[y * 48 + x] {
                        assert!(x >= x0 && x <= x1 && y >= y0 && y <= y1);
                    }
                }
            }
            // shrinking any side by one pixel loses some lit pixel
            let occupied_col =
                |x: usize| (0..48).any(|y| mask.data[y * 48 + x]);
            let occupied_row =
                |y: usize| (0..48).any(|x| mask.data[y * 48 + x]);
            assert!(occupied_col(x0) && occupied_col(x1));
            assert!(occupied_row(y0) && occupied_row(y1));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let config = ShapeSceneConfig::default();
        let a = gen_shape_scene(&config, &mut Rng::new(9)).unwrap();
        let b = gen_shape_scene(&config, &mut Rng::new(9)).unwrap();
        assert_eq!(a.image.pixels, b.image.pixels);
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.identities, b.identities);
    }

    #[test]
    fn distinct_colors_are_unique_and_sorted() {
        let config = ShapeSceneConfig {
            count_min: 4,
            count_max: 4,
            distinct_colors: true,
            ..Default::default()
        };
        let mut rng = Rng::new(11);
        for _ in 0..10 {
            let scene = gen_shape_scene(&config, &mut rng).unwrap();
            assert_eq!(scene.identities.len(), 4);
            let canonical: Vec<usize> = scene
                .identities
                .iter()
                .map(|id| SHAPE_COLORS.iter().position(|(n, _)| n == id).unwrap())
                .collect();
            let mut sorted = canonical.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), 4, "colors repeat: {:?}", scene.identities);
            assert_eq!(canonical, sorted, "not in canonical order");
        }
    }

    #[test]
    fn boxes_inside_unit_square() {
        let config = ShapeSceneConfig { count_min: 1, count_max: 4, ..Default::default() };
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let scene = gen_shape_scene(&config, &mut rng).unwrap();
            for b in &scene.boxes {
                assert!(b.x >= 0.0 && b.y >= 0.0);
                assert!(b.x + b.w <= 1.0 + 1e-12 && b.y + b.h <= 1.0 + 1e-12);
                assert!(b.w > 0.0 && b.h > 0.0);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ShapeSceneConfig::default();
        assert!(c.validate().is_ok());
        c.max_pair_iou = 0.0;
        assert!(c.validate().is_err());
        c = ShapeSceneConfig { count_min: 3, count_max: 2, ..Default::default() };
        assert!(c.validate().is_err());
        c = ShapeSceneConfig { distinct_colors: true, count_max: 5, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
