//! Subset-sum digit puzzles: a query digit image and a scene of scattered
//! digits such that exactly one subset of the scene sums to the query value
//! (the glyph 0 stands for the value 10).

use super::glyphs::render_glyph;
use super::pnm::Image;
use super::DataError;
use crate::geom::Rect;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct CaptchaConfig {
    pub digit_count_min: usize,
    pub digit_count_max: usize,
    pub scene_width: usize,
    pub scene_height: usize,
    pub query_size: usize,
    /// Rotation jitter bound in degrees.
    pub rotation_max_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub noise_sigma: f64,
}

impl Default for CaptchaConfig {
    fn default() -> Self {
        CaptchaConfig {
            digit_count_min: 2,
            digit_count_max: 6,
            scene_width: 300,
            scene_height: 75,
            query_size: 75,
            rotation_max_deg: 30.0,
            scale_min: 0.6,
            scale_max: 1.4,
            noise_sigma: 0.05,
        }
    }
}

impl CaptchaConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.digit_count_min == 0 || self.digit_count_min > self.digit_count_max {
            return Err(DataError::Config("bad digit count range".into()));
        }
        if self.digit_count_max > 16 {
            return Err(DataError::Config("digit_count_max too large for exhaustive checking".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 2.0) {
            return Err(DataError::Config("bad scale range".into()));
        }
        let envelope = (28.0 * self.scale_max * std::f64::consts::SQRT_2).ceil() as usize;
        if self.scene_height < envelope || self.scene_width < envelope {
            return Err(DataError::Config("scene too small for the largest glyph".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Digit images to stamp into scenes: either loaded MNIST digits or the
/// built-in glyph per digit.
#[derive(Clone, Debug)]
pub struct DigitPool {
    variants: Vec<Vec<Image>>, // indexed by digit 0..=9
}

impl DigitPool {
    pub fn procedural() -> Self {
        DigitPool { variants: (0u8..10).map(|d| vec![render_glyph(d)]).collect() }
    }

    pub fn from_labeled(pairs: &[(Image, u8)]) -> Result<Self, DataError> {
        let mut variants: Vec<Vec<Image>> = vec![Vec::new(); 10];
        for (img, label) in pairs {
            if *label > 9 {
                return Err(DataError::Config(format!("label {label} out of range")));
            }
            variants[*label as usize].push(img.clone());
        }
        if variants.iter().any(|v| v.is_empty()) {
            return Err(DataError::Config("pool must cover every digit 0..=9".into()));
        }
        Ok(DigitPool { variants })
    }

    fn sample(&self, digit: u8, rng: &mut Rng) -> &Image {
        let v = &self.variants[digit as usize];
        &v[rng.below(v.len())]
    }
}

/// One puzzle: the scene digits with their values and boxes, the query
/// image, and the unique index subset whose values sum to the query value.
#[derive(Clone, Debug)]
pub struct CaptchaInstance {
    pub scene: Image,
    pub query: Image,
    /// Digit values 1..=10 in scene placement order.
    pub values: Vec<u8>,
    /// Normalized boxes parallel to `values`.
    pub boxes: Vec<Rect>,
    /// Indices into `values`/`boxes`; may be empty only in hand-built
    /// instances, generation always yields a non-empty unique subset.
    pub solution: Vec<usize>,
    pub query_value: u8,
}

/// Indices of the unique subset of `values` summing to `target`, or None
/// when no subset or more than one subset does. Subsets are index subsets:
/// repeated values make distinct subsets.
pub fn unique_subset_sum(values: &[u8], target: u32) -> Option<Vec<usize>> {
    assert!(values.len() <= 20, "exhaustive enumeration only");
    let mut found: Option<u32> = None;
    for subset in 0u32..(1u32 << values.len()) {
        let sum: u32 = values
            .iter()
            .enumerate()
            .filter(|&(i, _)| subset & (1 << i) != 0)
            .map(|(_, &v)| v as u32)
            .sum();
        if sum == target {
            if found.is_some() {
                return None;
            }
            found = Some(subset);
        }
    }
    found.map(|subset| (0..values.len()).filter(|i| subset & (1 << i) != 0).collect())
}

/// Digit value shown by a glyph: 0 renders as the glyph "0" but counts 10.
fn glyph_for(value: u8) -> u8 {
    if value == 10 {
        0
    } else {
        value
    }
}

/// Random composition of `total` into `parts` values, each at least 1.
fn random_composition(total: u32, parts: usize, rng: &mut Rng) -> Vec<u8> {
    debug_assert!(parts as u32 <= total);
    let mut cuts: Vec<u32> = Vec::with_capacity(parts - 1);
    while cuts.len() < parts - 1 {
        let c = 1 + rng.below(total as usize - 1) as u32;
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    let mut values = Vec::with_capacity(parts);
    let mut prev = 0;
    for &c in &cuts {
        values.push((c - prev) as u8);
        prev = c;
    }
    values.push((total - prev) as u8);
    values
}

/// Stamps `glyph` into `canvas` rotated by `angle` radians and scaled by
/// `scale`, top-left at (ox, oy), compositing by maximum. Returns the tight
/// bounds of pixels brighter than a small threshold, if any.
fn stamp_glyph(
    canvas: &mut Image,
    glyph: &Image,
    ox: usize,
    oy: usize,
    scale: f64,
    angle: f64,
) -> Option<(usize, usize, usize, usize)> {
    let side = (28.0 * scale * (angle.cos().abs() + angle.sin().abs())).ceil() as usize;
    let half = side as f64 / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for dy in 0..side {
        for dx in 0..side {
            // rotate back into glyph space
            let rx = dx as f64 + 0.5 - half;
            let ry = dy as f64 + 0.5 - half;
            let gx = (cos * rx + sin * ry) / scale + 14.0;
            let gy = (-sin * rx + cos * ry) / scale + 14.0;
            if !(0.0..27.0).contains(&gx) || !(0.0..27.0).contains(&gy) {
                continue;
            }
            // bilinear sample
            let (x0, y0) = (gx as usize, gy as usize);
            let (tx, ty) = (gx.fract(), gy.fract());
            let sample = |xx: usize, yy: usize| glyph.get(xx.min(27), yy.min(27), 0) as f64;
            let v = sample(x0, y0) * (1.0 - tx) * (1.0 - ty)
                + sample(x0 + 1, y0) * tx * (1.0 - ty)
                + sample(x0, y0 + 1) * (1.0 - tx) * ty
                + sample(x0 + 1, y0 + 1) * tx * ty;
            let (cx, cy) = (ox + dx, oy + dy);
            if cx >= canvas.width || cy >= canvas.height {
                continue;
            }
            let v8 = v.round() as u8;
            if v8 > canvas.get(cx, cy, 0) {
                canvas.set(cx, cy, 0, v8);
            }
            if v8 > 32 {
                bounds = Some(match bounds {
                    None => (cx, cy, cx, cy),
                    Some((a, b, c, d)) => (a.min(cx), b.min(cy), c.max(cx), d.max(cy)),
                });
            }
        }
    }
    bounds
}

fn add_noise(image: &mut Image, sigma: f64, rng: &mut Rng) {
    if sigma <= 0.0 {
        return;
    }
    for p in image.pixels.iter_mut() {
        let v = *p as f64 / 255.0 + sigma * rng.normal();
        *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
}

const GENERATION_ATTEMPTS: usize = 1000;

pub fn gen_captcha(
    pool: &DigitPool,
    config: &CaptchaConfig,
    rng: &mut Rng,
) -> Result<CaptchaInstance, DataError> {
    config.validate()?;

    // choose values: a solution subset summing to the query plus decoys,
    // retried until the subset sum is globally unique
    let mut chosen: Option<(Vec<u8>, Vec<usize>, u8)> = None;
    for _ in 0..GENERATION_ATTEMPTS {
        let count = rng.range_usize(config.digit_count_min, config.digit_count_max);
        let query_value = 1 + rng.below(10) as u8;
        let solution_size = 1 + rng.below(count.min(query_value as usize));
        let mut values = if solution_size == 1 {
            vec![query_value]
        } else {
            random_composition(query_value as u32, solution_size, rng)
        };
        for _ in solution_size..count {
            values.push(1 + rng.below(10) as u8);
        }
        rng.shuffle(&mut values);
        if let Some(solution) = unique_subset_sum(&values, query_value as u32) {
            chosen = Some((values, solution, query_value));
            break;
        }
    }
    let (values, solution, query_value) = chosen
        .ok_or_else(|| DataError::Generation("no unique-solution puzzle found".into()))?;

    // place digits at disjoint positions
    let (w, h) = (config.scene_width, config.scene_height);
    let mut placements: Option<Vec<(usize, usize, f64, f64)>> = None;
    'restart: for _ in 0..GENERATION_ATTEMPTS {
        let mut taken: Vec<(usize, usize, usize, usize)> = Vec::new();
        let mut current = Vec::with_capacity(values.len());
        for _ in &values {
            let mut ok = false;
            for _ in 0..200 {
                let scale = rng.range_f64(config.scale_min, config.scale_max);
                let angle = rng.range_f64(
                    -config.rotation_max_deg.to_radians(),
                    config.rotation_max_deg.to_radians(),
                );
                let side = (28.0 * scale * (angle.cos().abs() + angle.sin().abs())).ceil() as usize;
                if side + 2 >= w || side + 2 >= h {
                    continue;
                }
                let ox = 1 + rng.below(w - side - 2);
                let oy = 1 + rng.below(h - side - 2);
                let margin = 2usize;
                let disjoint = taken.iter().all(|&(tx0, ty0, tx1, ty1)| {
                    ox + side + margin <= tx0 || tx1 + margin <= ox || oy + side + margin <= ty0 || ty1 + margin <= oy
                });
                if disjoint {
                    taken.push((ox, oy, ox + side, oy + side));
                    current.push((ox, oy, scale, angle));
                    ok = true;
                    break;
                }
            }
            if !ok {
                continue 'restart;
            }
        }
        placements = Some(current);
        break;
    }
    let placements =
        placements.ok_or_else(|| DataError::Generation("digit placement failed repeatedly".into()))?;

    // render the scene
    let mut scene = Image::new(w, h, 1);
    let mut boxes = Vec::with_capacity(values.len());
    for (&value, &(ox, oy, scale, angle)) in values.iter().zip(placements.iter()) {
        let glyph = pool.sample(glyph_for(value), rng);
        let bounds = stamp_glyph(&mut scene, glyph, ox, oy, scale, angle)
            .ok_or_else(|| DataError::Generation("glyph stamped no pixels".into()))?;
        let (x0, y0, x1, y1) = bounds;
        boxes.push(Rect::new(
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            (x1 - x0 + 1) as f64 / w as f64,
            (y1 - y0 + 1) as f64 / h as f64,
        ));
    }

    // render the query image: centered, unrotated, sized to the canvas
    let mut query = Image::new(config.query_size, config.query_size, 1);
    let qscale = config.query_size as f64 / 28.0 * 0.8;
    let qside = (28.0 * qscale).ceil() as usize;
    let qoff = (config.query_size - qside.min(config.query_size)) / 2;
    let qglyph = pool.sample(glyph_for(query_value), rng);
    stamp_glyph(&mut query, qglyph, qoff, qoff, qscale, 0.0);

    add_noise(&mut scene, config.noise_sigma, rng);
    add_noise(&mut query, config.noise_sigma, rng);

    Ok(CaptchaInstance { scene, query, values, boxes, solution, query_value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::iou;

    #[test]
    fn unique_subset_examples() {
        // {1, 2, 5, 4} with query 4: only {4}
        assert_eq!(unique_subset_sum(&[1, 2, 5, 4], 4), Some(vec![3]));
        // {1, 2, 5} with query 3: only {1, 2}
        assert_eq!(unique_subset_sum(&[1, 2, 5], 3), Some(vec![0, 1]));
        // ambiguous: two singletons
        assert_eq!(unique_subset_sum(&[2, 2], 2), None);
        // no subset at all
        assert_eq!(unique_subset_sum(&[1, 2, 5], 100), None);
        // empty subset is the unique way to reach 0
        assert_eq!(unique_subset_sum(&[1, 2], 0), Some(vec![]));
    }

    #[test]
    fn generated_instances_have_unique_solutions() {
        let pool = DigitPool::procedural();
        let config = CaptchaConfig::default();
        let mut rng = Rng::new(5);
        for _ in 0..40 {
            let inst = gen_captcha(&pool, &config, &mut rng).unwrap();
            let solution = unique_subset_sum(&inst.values, inst.query_value as u32)
                .expect("must be unique");
            assert_eq!(solution, inst.solution);
            assert!(!inst.solution.is_empty());
            let sum: u32 = inst.solution.iter().map(|&i| inst.values[i] as u32).sum();
            assert_eq!(sum, inst.query_value as u32);
            assert!(inst.values.iter().all(|&v| (1..=10).contains(&v)));
        }
    }

    #[test]
    fn scene_boxes_are_disjoint_and_inside() {
        let pool = DigitPool::procedural();
        let config = CaptchaConfig::default();
        let mut rng = Rng::new(6);
        for _ in 0..20 {
            let inst = gen_captcha(&pool, &config, &mut rng).unwrap();
            assert_eq!(inst.boxes.len(), inst.values.len());
            for b in &inst.boxes {
                assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 1.0 && b.y + b.h <= 1.0);
            }
            for i in 0..inst.boxes.len() {
                for j in i + 1..inst.boxes.len() {
                    assert_eq!(iou(&inst.boxes[i], &inst.boxes[j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let pool = DigitPool::procedural();
        let config = CaptchaConfig::default();
        let a = gen_captcha(&pool, &config, &mut Rng::new(77)).unwrap();
        let b = gen_captcha(&pool, &config, &mut Rng::new(77)).unwrap();
        assert_eq!(a.scene.pixels, b.scene.pixels);
        assert_eq!(a.query.pixels, b.query.pixels);
        assert_eq!(a.values, b.values);
        assert_eq!(a.solution, b.solution);
    }

    #[test]
    fn pool_from_labeled_requires_full_coverage() {
        let img = Image::new(28, 28, 1);
        let partial: Vec<(Image, u8)> = (0u8..9).map(|d| (img.clone(), d)).collect();
        assert!(DigitPool::from_labeled(&partial).is_err());
        let full: Vec<(Image, u8)> = (0u8..10).map(|d| (img.clone(), d)).collect();
        assert!(DigitPool::from_labeled(&full).is_ok());
    }

    #[test]
    fn compositions_sum_and_stay_positive() {
        let mut rng = Rng::new(8);
        for _ in 0..200 {
            let total = 2 + rng.below(9) as u32;
            let parts = 1 + rng.below(total as usize - 1).min(3);
            let values = random_composition(total, parts, &mut rng);
            assert_eq!(values.len(), parts);
            assert!(values.iter().all(|&v| v >= 1));
            assert_eq!(values.iter().map(|&v| v as u32).sum::<u32>(), total);
        }
    }
}
