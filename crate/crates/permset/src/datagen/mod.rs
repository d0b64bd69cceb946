//! Synthetic dataset generation and on-disk dataset layout.
//!
//! A dataset directory holds `annotations.tsv` plus an `images/` directory
//! (P6 for color scenes, P5 for grayscale) and, for puzzle datasets, a
//! `queries/` directory. Each annotation line is
//!
//! ```text
//! id<TAB>image<TAB>x,y,w,h,identity;...[<TAB>query_image<TAB>solution_indices]
//! ```
//!
//! with boxes in normalized coordinates and the third field possibly empty
//! (no objects).

mod captcha;
mod glyphs;
mod idx;
mod pnm;
mod shapes;

pub use captcha::{gen_captcha, unique_subset_sum, CaptchaConfig, CaptchaInstance, DigitPool};
pub use glyphs::render_glyph;
pub use idx::{
    load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use pnm::{decode_pnm, read_pnm, Image};
pub use shapes::{gen_shape_scene, BackgroundMode, ShapeScene, ShapeSceneConfig, SHAPE_COLORS};

use crate::geom::Rect;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    /// Malformed annotation line; `line` is 1-based.
    Parse { path: String, line: usize, message: String },
    /// Malformed binary file.
    Format { path: String, message: String },
    Config(String),
    Generation(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "I/O error: {e}"),
            DataError::Parse { path, line, message } => {
                write!(f, "{path}:{line}: {message}")
            }
            DataError::Format { path, message } => write!(f, "{path}: {message}"),
            DataError::Config(msg) => write!(f, "invalid config: {msg}"),
            DataError::Generation(msg) => write!(f, "generation failed: {msg}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// One dataset record. Boxes and identities are parallel; the query fields
/// are present only for puzzle datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleAnnotation {
    pub id: u64,
    pub image: String,
    pub boxes: Vec<Rect>,
    pub identities: Vec<String>,
    pub query_image: Option<String>,
    pub solution: Option<Vec<usize>>,
}

/// A sample ready to be written: rendered images plus annotation content.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub image: Image,
    pub query: Option<Image>,
    pub boxes: Vec<Rect>,
    pub identities: Vec<String>,
    pub solution: Option<Vec<usize>>,
}

impl From<ShapeScene> for GeneratedSample {
    fn from(scene: ShapeScene) -> Self {
        GeneratedSample {
            image: scene.image,
            query: None,
            boxes: scene.boxes,
            identities: scene.identities,
            solution: None,
        }
    }
}

impl From<CaptchaInstance> for GeneratedSample {
    fn from(inst: CaptchaInstance) -> Self {
        GeneratedSample {
            image: inst.scene,
            query: Some(inst.query),
            boxes: inst.boxes,
            identities: inst.values.iter().map(|v| v.to_string()).collect(),
            solution: Some(inst.solution),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub samples: Vec<SampleAnnotation>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn load_image(&self, sample: &SampleAnnotation) -> Result<Image, DataError> {
        read_pnm(&self.dir.join(&sample.image))
    }

    pub fn load_query(&self, sample: &SampleAnnotation) -> Result<Option<Image>, DataError> {
        match &sample.query_image {
            Some(q) => Ok(Some(read_pnm(&self.dir.join(q))?)),
            None => Ok(None),
        }
    }

    /// True when every sample carries a query image (puzzle dataset).
    pub fn is_puzzle(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.query_image.is_some())
    }

    /// The boxes a model should predict: the solution subset for puzzle
    /// datasets, every annotated box otherwise.
    pub fn target_boxes(&self, sample: &SampleAnnotation) -> Vec<Rect> {
        match &sample.solution {
            Some(solution) => solution.iter().map(|&i| sample.boxes[i]).collect(),
            None => sample.boxes.clone(),
        }
    }
}

fn render_annotation_line(a: &SampleAnnotation) -> String {
    let boxes = a
        .boxes
        .iter()
        .zip(a.identities.iter())
        .map(|(b, id)| format!("{},{},{},{},{}", b.x, b.y, b.w, b.h, id))
        .collect::<Vec<_>>()
        .join(";");
    let mut line = format!("{}\t{}\t{}", a.id, a.image, boxes);
    if let (Some(query), Some(solution)) = (&a.query_image, &a.solution) {
        let sol = solution.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        line.push_str(&format!("\t{query}\t{sol}"));
    }
    line
}

fn parse_annotation_line(line: &str, path: &str, line_no: usize) -> Result<SampleAnnotation, DataError> {
    let err = |message: String| DataError::Parse { path: path.to_string(), line: line_no, message };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 && fields.len() != 5 {
        return Err(err(format!("expected 3 or 5 tab-separated fields, got {}", fields.len())));
    }
    let id: u64 = fields[0].parse().map_err(|_| err(format!("bad id {:?}", fields[0])))?;
    let image = fields[1].to_string();
    let mut boxes = Vec::new();
    let mut identities = Vec::new();
    if !fields[2].is_empty() {
        for part in fields[2].split(';') {
            let items: Vec<&str> = part.split(',').collect();
            if items.len() != 5 {
                return Err(err(format!("box needs 5 comma-separated values, got {:?}", part)));
            }
            let mut nums = [0.0f64; 4];
            for (slot, item) in nums.iter_mut().zip(items.iter()) {
                *slot = item.parse().map_err(|_| err(format!("bad number {item:?}")))?;
            }
            boxes.push(Rect::new(nums[0], nums[1], nums[2], nums[3]));
            identities.push(items[4].to_string());
        }
    }
    let (query_image, solution) = if fields.len() == 5 {
        let sol = if fields[4].is_empty() {
            Vec::new()
        } else {
            fields[4]
                .split(',')
                .map(|s| s.parse::<usize>().map_err(|_| err(format!("bad solution index {s:?}"))))
                .collect::<Result<Vec<_>, _>>()?
        };
        if let Some(&bad) = sol.iter().find(|&&i| i >= boxes.len()) {
            return Err(err(format!("solution index {bad} out of range")));
        }
        (Some(fields[3].to_string()), Some(sol))
    } else {
        (None, None)
    };
    Ok(SampleAnnotation { id, image, boxes, identities, query_image, solution })
}

/// Writes images and the annotation file; returns the recorded annotations.
pub fn write_dataset(dir: &Path, samples: &[GeneratedSample]) -> Result<Vec<SampleAnnotation>, DataError> {
    fs::create_dir_all(dir.join("images"))?;
    if samples.iter().any(|s| s.query.is_some()) {
        fs::create_dir_all(dir.join("queries"))?;
    }
    let mut annotations = Vec::with_capacity(samples.len());
    let mut lines = String::new();
    for (i, sample) in samples.iter().enumerate() {
        let ext = if sample.image.channels == 1 { "pgm" } else { "ppm" };
        let image_rel = format!("images/{i:06}.{ext}");
        sample.image.write_pnm(&dir.join(&image_rel))?;
        let query_rel = match &sample.query {
            Some(q) => {
                let rel = format!("queries/{i:06}.pgm");
                q.write_pnm(&dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let annotation = SampleAnnotation {
            id: i as u64,
            image: image_rel,
            boxes: sample.boxes.clone(),
            identities: sample.identities.clone(),
            query_image: query_rel,
            solution: sample.solution.clone(),
        };
        lines.push_str(&render_annotation_line(&annotation));
        lines.push('\n');
        annotations.push(annotation);
    }
    fs::write(dir.join("annotations.tsv"), lines)?;
    Ok(annotations)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let path = dir.join("annotations.tsv");
    let text = fs::read_to_string(&path)?;
    let path_str = path.display().to_string();
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        samples.push(parse_annotation_line(line, &path_str, i + 1)?);
    }
    Ok(Dataset { dir: dir.to_path_buf(), samples })
}
