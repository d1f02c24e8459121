//! Slice-pair ingestion, preprocessing and the synthetic lesion generator.
//!
//! Dataset layout on disk:
//!
//! ```text
//! root/images/*.png      8- or 16-bit grayscale slices
//! root/masks/*.png       8-bit label maps with values {0,1,2,3}
//! root/manifest.tsv      lines: <split>\t<image path>\t<mask path>
//! ```
//!
//! Paths in the manifest are relative to `root`. Loading is deterministic in
//! manifest order.

use crate::error::{Error, Result};
use crate::grad::interp;
use crate::supervision::edge_targets_from_mask;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const DEFAULT_TARGET: (usize, usize) = (256, 256);
const SIGMA_FLOOR: f64 = 1e-8;

/// Raw slice: image intensities plus a label map in {0,1,2,3}.
#[derive(Clone, Debug)]
pub struct SlicePair {
    pub image: Array2<f64>,
    pub mask: Array2<u8>,
}

/// Network-ready sample: z-scored image, binary mask, derived edge mask.
#[derive(Clone, Debug)]
pub struct Sample {
    /// (1, H, W) normalized image.
    pub x: Array3<f64>,
    pub y_mask: Array2<u8>,
    pub y_edge: Array2<u8>,
}

/// Collapses infection labels: 0 stays background, {1,2,3} become foreground.
pub fn merge_labels(mask: &Array2<u8>) -> Result<Array2<u8>> {
    if let Some(bad) = mask.iter().find(|v| **v > 3) {
        return Err(Error::Data(format!(
            "mask label {bad} out of range (expected 0..=3)"
        )));
    }
    Ok(mask.mapv(|v| (v != 0) as u8))
}

/// Per-slice z-score with the standard deviation clamped at 1e-8; a constant
/// image normalizes to all zeros.
pub fn zscore(image: &Array2<f64>) -> Array2<f64> {
    let n = image.len() as f64;
    let mean = image.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = image.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = (var.sqrt() as f64).max(SIGMA_FLOOR);
    image.mapv(|v| (v - mean as f64) / std)
}

/// Resize (bilinear image, nearest-neighbor mask), merge labels, z-score and
/// derive the edge ground truth.
pub fn preprocess(pair: &SlicePair, target: (usize, usize)) -> Result<Sample> {
    if pair.image.dim() != pair.mask.dim() {
        return Err(Error::Data(format!(
            "image {:?} and mask {:?} sizes differ",
            pair.image.dim(),
            pair.mask.dim()
        )));
    }
    if !pair.image.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("image contains non-finite values".into()));
    }
    let resized = interp::resize_plane(pair.image.view(), target);
    let x2 = zscore(&resized);
    let mask_resized = interp::resize_nearest_u8(&pair.mask, target);
    let y_mask = merge_labels(&mask_resized)?;
    let y_edge = edge_targets_from_mask(&y_mask);
    let (h, w) = target;
    let x = Array3::from_shape_fn((1, h, w), |(_, y, xx)| x2[[y, xx]]);
    Ok(Sample { x, y_mask, y_edge })
}

// ---- disk I/O ----

/// Loads an 8/16-bit grayscale image as raw f64 intensities.
pub fn load_gray_f64(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let out = match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Array2::from_shape_fn((h, w), |(y, x)| buf.get_pixel(x as u32, y as u32).0[0] as f64)
        }
        other => {
            let buf = other.to_luma8();
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Array2::from_shape_fn((h, w), |(y, x)| buf.get_pixel(x as u32, y as u32).0[0] as f64)
        }
    };
    Ok(out)
}

/// Loads a label mask (8-bit grayscale values, expected in {0,1,2,3}).
pub fn load_mask_u8(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let buf = img.to_luma8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| buf.get_pixel(x as u32, y as u32).0[0]))
}

/// Loads a grayscale image as a probability map in [0,1], normalizing by the
/// bit depth (255 or 65535).
pub fn load_prob_map(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let out = match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Array2::from_shape_fn((h, w), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
            })
        }
        other => {
            let buf = other.to_luma8();
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Array2::from_shape_fn((h, w), |(y, x)| {
                buf.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
            })
        }
    };
    Ok(out)
}

/// Loads a ground-truth mask leniently: label maps with values in {0..3} are
/// merged; anything else is treated as a 0/255-style binary image
/// (threshold at 128).
pub fn load_binary_mask(path: &Path) -> Result<Array2<u8>> {
    let raw = load_mask_u8(path)?;
    if raw.iter().all(|v| *v <= 3) {
        merge_labels(&raw)
    } else {
        Ok(raw.mapv(|v| (v >= 128) as u8))
    }
}

/// Writes a [0,1] map as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path)?;
    Ok(())
}

fn save_label_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([mask[[y, x]]]));
        }
    }
    buf.save(path)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub split: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join("manifest.tsv");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Data(format!(
                "manifest line {} has {} columns, want 3 (split, image, mask)",
                lineno + 1,
                cols.len()
            )));
        }
        entries.push(ManifestEntry {
            split: cols[0].to_string(),
            image: root.join(cols[1]),
            mask: root.join(cols[2]),
        });
    }
    Ok(entries)
}

/// Loads and preprocesses every manifest pair of the given split, in
/// manifest order.
pub fn load_dataset(root: &Path, split: &str, target: (usize, usize)) -> Result<Vec<Sample>> {
    let entries = read_manifest(root)?;
    let mut samples = Vec::new();
    for entry in entries.iter().filter(|e| e.split == split) {
        if !entry.image.exists() {
            return Err(Error::Data(format!("missing image file {}", entry.image.display())));
        }
        if !entry.mask.exists() {
            return Err(Error::Data(format!("missing mask file {}", entry.mask.display())));
        }
        let image = load_gray_f64(&entry.image)?;
        let mask = load_mask_u8(&entry.mask)?;
        if image.dim() != mask.dim() {
            return Err(Error::Data(format!(
                "{} is {:?} but {} is {:?}",
                entry.image.display(),
                image.dim(),
                entry.mask.display(),
                mask.dim()
            )));
        }
        samples.push(preprocess(&SlicePair { image, mask }, target)?);
    }
    Ok(samples)
}

// ---- synthetic data ----

/// Generates reproducible slices: smooth low-frequency backgrounds plus 1-3
/// soft elliptical lesions whose support defines the mask (labels 1..3).
pub fn synth_generate(n: usize, seed: u64, size: usize) -> Vec<SlicePair> {
    assert!(n >= 1, "need at least one slice");
    assert!(size >= 16, "size must be at least 16");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(synth_one(&mut rng, size));
    }
    out
}

fn synth_one(rng: &mut ChaCha8Rng, size: usize) -> SlicePair {
    let s = size as f64;
    // smooth background: a few low-frequency cosine waves
    let n_waves = 3;
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5) / s, // fy
                rng.gen_range(0.5..2.5) / s, // fx
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.05..0.15), // amplitude
            )
        })
        .collect();
    let mut image = Array2::from_shape_fn((size, size), |(y, x)| {
        let mut v = 0.3f64;
        for (fy, fx, phase, amp) in &waves {
            v += amp
                * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).cos();
        }
        v
    });
    let mut mask = Array2::<u8>::zeros((size, size));

    let n_lesions = rng.gen_range(1..=3);
    for _ in 0..n_lesions {
        let label: u8 = rng.gen_range(1..=3);
        let cy = rng.gen_range(0.25 * s..0.75 * s);
        let cx = rng.gen_range(0.25 * s..0.75 * s);
        let ry = rng.gen_range(0.08 * s..0.22 * s).max(2.0);
        let rx = rng.gen_range(0.08 * s..0.22 * s).max(2.0);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let amp = rng.gen_range(0.3..0.55);
        let (sin_t, cos_t) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = (cos_t * dx + sin_t * dy) / rx;
                let v = (-sin_t * dx + cos_t * dy) / ry;
                let r2 = u * u + v * v;
                if r2 <= 1.0 {
                    mask[[y, x]] = label;
                }
                image[[y, x]] += amp * (-2.0 * r2).exp();
            }
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));
    debug_assert!(mask.iter().any(|v| *v != 0), "generator produced an empty mask");
    SlicePair { image, mask }
}

/// Writes slices to the on-disk dataset layout with a deterministic
/// train/test split (first `train_frac` of the list is `train`).
pub fn write_synth_dataset(root: &Path, pairs: &[SlicePair], train_frac: f64) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let n_train = ((pairs.len() as f64) * train_frac).round() as usize;
    let mut manifest = fs::File::create(root.join("manifest.tsv"))?;
    for (i, pair) in pairs.iter().enumerate() {
        let img_rel = format!("images/slice_{i:04}.png");
        let mask_rel = format!("masks/slice_{i:04}.png");
        // synthetic intensities are already in [0,1]
        save_gray_png(&root.join(&img_rel), &pair.image)?;
        save_label_png(&root.join(&mask_rel), &pair.mask)?;
        let split = if i < n_train { "train" } else { "test" };
        writeln!(manifest, "{split}\t{img_rel}\t{mask_rel}")?;
    }
    Ok(())
}
