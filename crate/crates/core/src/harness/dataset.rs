use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nn;
use crate::patcher::Micrograph;
use crate::textknow::SEM_CATEGORIES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Disk,
    Synthetic,
}

/// Labeled micrographs. Labels are dense in `0..label_map.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<(Micrograph, usize)>,
    /// Category name of each label index.
    pub label_map: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, y)| *y).collect()
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

/// Decodes any PNG/JPEG to a single-channel `[0, 1]` raster.
pub fn decode_image(path: &Path) -> Result<Micrograph> {
    let undecodable = |reason: String| Error::UndecodableImage {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::open(path).map_err(|e| undecodable(e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    if w == 0 || h == 0 {
        return Err(undecodable("image has no pixels".into()));
    }
    let data = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Micrograph::new(
        Tensor::new([h as usize, w as usize, 1], data)?,
        None,
        path.to_string_lossy(),
    )
}

/// One subdirectory per category under `root`. Categories and files are
/// sorted lexicographically; non-image files are ignored.
pub fn ingest_dataset(root: &Path) -> Result<Dataset> {
    let dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if dirs.is_empty() {
        return Err(Error::TooFewItems(format!(
            "{} has no category directories",
            root.display()
        )));
    }
    let mut items = Vec::new();
    let mut label_map = Vec::with_capacity(dirs.len());
    for (label, dir) in dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image(p)).collect();
        if files.is_empty() {
            return Err(Error::EmptyCategory(dir.clone()));
        }
        for f in files {
            let mut m = decode_image(&f)?;
            m.label = Some(label);
            items.push((m, label));
        }
        label_map.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    Ok(Dataset {
        items,
        label_map,
        provenance: Provenance::Disk,
    })
}

/// Noise-free texture value in `[0, 1]` of class `k` at pixel `(y, x)`.
/// Classes cycle through stripes, dot lattices and checkerboards; every
/// third class the period grows and stripes change orientation.
fn texture(k: usize, y: f64, x: f64) -> f64 {
    let variant = k / 3;
    let period = 8.0 + 4.0 * variant as f64;
    match k % 3 {
        0 => {
            let t = if variant % 2 == 0 { x } else { x + y };
            if (t / period).rem_euclid(1.0) < 0.5 { 1.0 } else { 0.0 }
        }
        1 => {
            let (fy, fx) = ((y / period).rem_euclid(1.0) - 0.5, (x / period).rem_euclid(1.0) - 0.5);
            if fy * fy + fx * fx < 0.09 { 1.0 } else { 0.0 }
        }
        _ => {
            let a = (x / period).floor() as i64 + (y / period).floor() as i64;
            if a.rem_euclid(2) == 0 { 1.0 } else { 0.0 }
        }
    }
}

/// `classes × per_class` square `size×size` grayscale textures with a random
/// phase per image and 5% uniform noise. Class `k` is named
/// `SEM_CATEGORIES[k]`.
pub fn generate_synthetic_dataset(classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if !(2..=10).contains(&classes) {
        return Err(Error::InvalidArgument(format!("{classes} classes outside 2..=10")));
    }
    if size == 0 {
        return Err(Error::EmptyImage);
    }
    let mut rng = nn::rng(seed);
    let mut items = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        for i in 0..per_class {
            let (py, px) = (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
            let mut data = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let t = texture(k, y as f64 + py, x as f64 + px);
                    let noise: f64 = rng.random();
                    data.push((0.95 * t + 0.05 * noise) as f32);
                }
            }
            let m = Micrograph::new(
                Tensor::new([size, size, 1], data)?,
                Some(k),
                format!("synthetic/{}/{i:04}", SEM_CATEGORIES[k]),
            )?;
            items.push((m, k));
        }
    }
    Ok(Dataset {
        items,
        label_map: SEM_CATEGORIES[..classes].iter().map(|s| s.to_string()).collect(),
        provenance: Provenance::Synthetic,
    })
}
