//! Dataset handling: SIRST-style directory loading, deterministic
//! train/test splitting, synthetic scene generation ([`synth`]), and
//! checkpoint persistence ([`checkpoint`]).
//!
//! Directory layout: `<root>/images/<id>.png` and `<root>/masks/<id>.png`,
//! 8-bit grayscale. Images are scaled to [0, 1]; masks binarize at
//! value > 127. Spatial sizes are reflect-padded up to the next multiple
//! of the model's downsampling factor, and the original size is kept on
//! the record so predictions can be cropped back before metrics.

pub mod checkpoint;
pub mod synth;

use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One image/mask pair, padded, with its pre-padding size.
#[derive(Debug, Clone)]
pub struct SampleRecord<S> {
    pub id: String,
    /// (1, 1, H, W) grayscale in [0, 1], H and W already padded.
    pub image: Tensor4<S>,
    /// (1, 1, H, W) strict 0/1 mask, padded alongside the image.
    pub mask: Tensor4<S>,
    /// Spatial size before padding (h, w); crop predictions back to this.
    pub orig_hw: (usize, usize),
}

/// Reads an 8-bit grayscale PNG into a (1, 1, h, w) tensor scaled by 1/255.
pub fn read_png_gray<S: Scalar>(path: &Path) -> Result<Tensor4<S>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("unreadable image {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| S::of_f64(v as f64 / 255.0))
        .collect();
    Tensor4::from_vec([1, 1, h, w], data)
}

/// Writes a (1, 1, h, w) tensor of values in [0, 1] as an 8-bit grayscale
/// PNG (values are clamped, then rounded to 0..=255).
pub fn write_png_gray<S: Scalar>(path: &Path, t: &Tensor4<S>) -> Result<()> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 1 {
        return Err(Error::shape(format!(
            "write_png_gray: expected [1,1,h,w], got {:?}",
            t.shape()
        )));
    }
    let bytes: Vec<u8> = t
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer length matches dimensions by construction");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}

/// Mirror-pads (no edge repetition) the bottom/right of a (1, 1, h, w)
/// tensor up to the next multiple of `multiple`. Returns the padded
/// tensor and the original (h, w).
pub fn pad_to_multiple<S: Scalar>(
    t: &Tensor4<S>,
    multiple: usize,
) -> Result<(Tensor4<S>, (usize, usize))> {
    assert!(multiple >= 1, "padding multiple must be positive");
    let [n, c, h, w] = t.shape();
    let target_h = h.div_ceil(multiple) * multiple;
    let target_w = w.div_ceil(multiple) * multiple;
    if (target_h, target_w) == (h, w) {
        return Ok((t.clone(), (h, w)));
    }
    // Reflection needs at least pad+1 source rows/cols.
    if target_h - h > h - 1 || target_w - w > w - 1 {
        return Err(Error::shape(format!(
            "image {h}x{w} too small to reflect-pad to {target_h}x{target_w}"
        )));
    }
    let reflect = |i: usize, size: usize| -> usize {
        if i < size { i } else { 2 * size - 2 - i }
    };
    let mut out = Tensor4::zeros([n, c, target_h, target_w]);
    for ni in 0..n {
        for ci in 0..c {
            let src = t.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for y in 0..target_h {
                let sy = reflect(y, h);
                for x in 0..target_w {
                    dst[y * target_w + x] = src[sy * w + reflect(x, w)];
                }
            }
        }
    }
    Ok((out, (h, w)))
}

/// Crops a (n, c, H, W) tensor back to the top-left (h, w) window.
pub fn crop_to<S: Scalar>(t: &Tensor4<S>, hw: (usize, usize)) -> Result<Tensor4<S>> {
    let [n, c, full_h, full_w] = t.shape();
    let (h, w) = hw;
    if h > full_h || w > full_w {
        return Err(Error::shape(format!(
            "crop_to: {h}x{w} exceeds tensor {full_h}x{full_w}"
        )));
    }
    let mut out = Tensor4::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let src = t.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[y * full_w..y * full_w + w]);
            }
        }
    }
    Ok(out)
}

/// Loads every image/mask pair under `root` (see module docs for the
/// layout), padding spatial dims to a multiple of `multiple`. Pairs are
/// returned sorted by id; a missing directory or an image set with no
/// PNGs yields an empty list with a logged warning.
pub fn load_dataset<S: Scalar>(root: &Path, multiple: usize) -> Result<Vec<SampleRecord<S>>> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        log::warn!("no images/ directory under {}; empty dataset", root.display());
        return Ok(Vec::new());
    }
    let mut stems: Vec<String> = std::fs::read_dir(&images_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            match p.extension().and_then(|s| s.to_str()) {
                Some("png") => p.file_stem().and_then(|s| s.to_str()).map(String::from),
                _ => None,
            }
        })
        .collect();
    stems.sort_unstable();
    if stems.is_empty() {
        log::warn!("no PNG images under {}; empty dataset", images_dir.display());
        return Ok(Vec::new());
    }

    let mut records = Vec::with_capacity(stems.len());
    for stem in stems {
        let mask_path = root.join("masks").join(format!("{stem}.png"));
        if !mask_path.is_file() {
            return Err(Error::Data(format!("no mask for image stem {stem:?}")));
        }
        let image = read_png_gray::<S>(&images_dir.join(format!("{stem}.png")))?;
        let mask_raw = read_png_gray::<S>(&mask_path)?;
        if image.shape() != mask_raw.shape() {
            return Err(Error::shape(format!(
                "{stem}: image {:?} vs mask {:?}",
                image.shape(),
                mask_raw.shape()
            )));
        }
        // Binarize at > 127 of the original byte value (127/255 scaled).
        let mask_data = mask_raw
            .iter()
            .map(|v| if v.as_f64() * 255.0 > 127.0 { S::one() } else { S::zero() })
            .collect();
        let mask = Tensor4::from_vec(mask_raw.shape(), mask_data)?;
        let (image, orig_hw) = pad_to_multiple(&image, multiple)?;
        let (mask, _) = pad_to_multiple(&mask, multiple)?;
        records.push(SampleRecord {
            id: stem,
            image,
            mask,
            orig_hw,
        });
    }
    Ok(records)
}

/// Deterministic shuffled split; the train side gets round(ratio * n).
pub fn split<S>(
    mut samples: Vec<SampleRecord<S>>,
    ratio: f64,
    seed: u64,
) -> (Vec<SampleRecord<S>>, Vec<SampleRecord<S>>) {
    assert!((0.0..=1.0).contains(&ratio), "split ratio must lie in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let n_train = (ratio * samples.len() as f64).round() as usize;
    let test = samples.split_off(n_train.min(samples.len()));
    (samples, test)
}

/// Stacks equally-sized records into batch tensors (images, masks).
pub fn stack_batch<S: Scalar>(records: &[&SampleRecord<S>]) -> Result<(Tensor4<S>, Tensor4<S>)> {
    if records.is_empty() {
        return Err(Error::data("stack_batch: empty batch"));
    }
    let [_, _, h, w] = records[0].image.shape();
    let n = records.len();
    let mut images = Tensor4::zeros([n, 1, h, w]);
    let mut masks = Tensor4::zeros([n, 1, h, w]);
    for (i, r) in records.iter().enumerate() {
        if r.image.shape() != [1, 1, h, w] {
            return Err(Error::shape(format!(
                "stack_batch: record {} is {:?}, batch is [1,1,{h},{w}]",
                r.id,
                r.image.shape()
            )));
        }
        images.plane_mut(i, 0).copy_from_slice(r.image.plane(0, 0));
        masks.plane_mut(i, 0).copy_from_slice(r.mask.plane(0, 0));
    }
    Ok((images, masks))
}
