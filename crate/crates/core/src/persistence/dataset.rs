//! Dataset ingestion. Two on-disk layouts:
//!
//! * `davis`: `JPEGImages/<res>/<seq>/*` frames with
//!   `Annotations/<res>/<seq>/*` masks;
//! * `flat_pairs`: sibling `frames/` and `masks/` directories, optionally
//!   with one subdirectory per sequence.
//!
//! Frames and annotations pair by exact filename stem; ordering is
//! lexicographic by stem, independent of filesystem enumeration order.
//! Annotations are binarized at 128 on load.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::GenericImageView;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IMAGE_EXTS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetLayout {
    Davis,
    FlatPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Video,
    Still,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    /// Frame paths in stem order.
    pub frames: Vec<PathBuf>,
    /// Annotation path per frame; `None` when the frame has no mask.
    pub masks: Vec<Option<PathBuf>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn stem(&self, i: usize) -> String {
        self.frames[i]
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub kind: DatasetKind,
    pub sequences: Vec<Sequence>,
    /// Human-readable notes about broken pairings.
    pub exceptions: Vec<String>,
}

impl DatasetIndex {
    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    /// Sequences usable for supervised training (every frame annotated).
    pub fn fully_annotated(&self) -> Vec<&Sequence> {
        self.sequences
            .iter()
            .filter(|s| s.masks.iter().all(Option::is_some))
            .collect()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTS.contains(&e.to_lowercase().as_str()))
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && is_image(&path) {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

fn list_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn pair_sequence(
    name: &str,
    frame_dir: &Path,
    mask_dir: &Path,
    exceptions: &mut Vec<String>,
) -> Result<Option<Sequence>> {
    let frames = list_images(frame_dir)?;
    if frames.is_empty() {
        return Ok(None);
    }
    let masks = list_images(mask_dir)?;
    let mut seq = Sequence {
        name: name.to_string(),
        frames: Vec::with_capacity(frames.len()),
        masks: Vec::with_capacity(frames.len()),
    };
    for (stem, path) in &frames {
        seq.frames.push(path.clone());
        match masks.get(stem) {
            Some(m) => seq.masks.push(Some(m.clone())),
            None => {
                exceptions.push(format!("{name}/{stem}: frame has no annotation"));
                seq.masks.push(None);
            }
        }
    }
    for stem in masks.keys() {
        if !frames.contains_key(stem) {
            exceptions.push(format!("{name}/{stem}: annotation has no frame"));
        }
    }
    Ok(Some(seq))
}

pub fn detect_layout(root: &Path) -> Result<DatasetLayout> {
    if root.join("JPEGImages").is_dir() {
        Ok(DatasetLayout::Davis)
    } else if root.join("frames").is_dir() {
        Ok(DatasetLayout::FlatPairs)
    } else {
        Err(Error::Data(format!(
            "{}: neither JPEGImages/ (davis) nor frames/ (flat_pairs) found",
            root.display()
        )))
    }
}

pub fn index_dataset(root: &Path, layout: DatasetLayout) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} does not exist", root.display())));
    }
    let mut exceptions = Vec::new();
    let mut sequences = Vec::new();
    match layout {
        DatasetLayout::Davis => {
            let images = root.join("JPEGImages");
            let resolutions = list_subdirs(&images)?;
            let res_dir = resolutions
                .first()
                .ok_or_else(|| Error::Data(format!("{}: JPEGImages has no resolution directory", root.display())))?;
            let res_name = res_dir.file_name().unwrap().to_string_lossy().into_owned();
            let ann_root = root.join("Annotations").join(&res_name);
            for seq_dir in list_subdirs(res_dir)? {
                let name = seq_dir.file_name().unwrap().to_string_lossy().into_owned();
                if let Some(seq) =
                    pair_sequence(&name, &seq_dir, &ann_root.join(&name), &mut exceptions)?
                {
                    sequences.push(seq);
                }
            }
        }
        DatasetLayout::FlatPairs => {
            let frames_root = root.join("frames");
            let masks_root = root.join("masks");
            let subdirs = list_subdirs(&frames_root)?;
            if subdirs.is_empty() {
                let name = root
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "sequence".into());
                if let Some(seq) = pair_sequence(&name, &frames_root, &masks_root, &mut exceptions)? {
                    sequences.push(seq);
                }
            } else {
                for seq_dir in subdirs {
                    let name = seq_dir.file_name().unwrap().to_string_lossy().into_owned();
                    if let Some(seq) =
                        pair_sequence(&name, &seq_dir, &masks_root.join(&name), &mut exceptions)?
                    {
                        sequences.push(seq);
                    }
                }
            }
        }
    }
    if sequences.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", root.display())));
    }
    let kind = if sequences.iter().all(|s| s.len() == 1) {
        DatasetKind::Still
    } else {
        DatasetKind::Video
    };
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        kind,
        sequences,
        exceptions,
    })
}

/// Indexes with layout auto-detection; a bare directory of images becomes a
/// single mask-less sequence (inference input).
pub fn index_auto(root: &Path) -> Result<DatasetIndex> {
    match detect_layout(root) {
        Ok(layout) => index_dataset(root, layout),
        Err(_) => {
            let frames = list_images(root)?;
            if frames.is_empty() {
                return Err(Error::Data(format!(
                    "{}: no dataset layout and no images found",
                    root.display()
                )));
            }
            let name = root
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "sequence".into());
            let mut seq = Sequence {
                name,
                frames: Vec::new(),
                masks: Vec::new(),
            };
            for (_, path) in frames {
                seq.frames.push(path);
                seq.masks.push(None);
            }
            Ok(DatasetIndex {
                root: root.to_path_buf(),
                kind: DatasetKind::Video,
                sequences: vec![seq],
                exceptions: Vec::new(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// image IO

/// Loads an image as CHW RGB in `[0,1]`.
pub fn load_rgb01<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)?;
    let (w, h) = img.dimensions();
    let rgb = img.to_rgb8();
    let mut out = Tensor::zeros(vec![3, h as usize, w as usize]);
    let scale = T::from_f64_c(1.0 / 255.0);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set3(c, y as usize, x as usize, T::from_f64_c(px.0[c] as f64) * scale);
        }
    }
    Ok(out)
}

/// Loads an 8-bit annotation, binarized at 128, as `[1,H,W]` in `{0,1}`.
pub fn load_mask<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Tensor::zeros(vec![1, h as usize, w as usize]);
    for (x, y, px) in img.enumerate_pixels() {
        let v = if px.0[0] >= 128 { T::one() } else { T::zero() };
        out.set3(0, y as usize, x as usize, v);
    }
    Ok(out)
}

/// Loads an 8-bit grayscale map as `[1,H,W]` in `[0,1]` (levels `k/255`).
pub fn load_gray01<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Tensor::zeros(vec![1, h as usize, w as usize]);
    let scale = T::from_f64_c(1.0 / 255.0);
    for (x, y, px) in img.enumerate_pixels() {
        out.set3(0, y as usize, x as usize, T::from_f64_c(px.0[0] as f64) * scale);
    }
    Ok(out)
}

/// Saves a `[1,H,W]` map in `[0,1]` as an 8-bit PNG, scaled to `[0,255]` and
/// rounded half-up.
pub fn save_gray_map<T: Scalar>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = map.at3(0, y, x).to_f64().unwrap_or(0.0).clamp(0.0, 1.0);
            let q = (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([q]));
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, value: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let img = image::GrayImage::from_pixel(w, h, image::Luma([value]));
        img.save(path).unwrap();
    }

    #[test]
    fn flat_pairs_indexing_with_sequences() {
        let dir = tempfile::tempdir().unwrap();
        for seq in ["a", "b"] {
            for i in 0..3 {
                write_png(&dir.path().join(format!("frames/{seq}/f{i:03}.png")), 8, 8, 100);
                write_png(&dir.path().join(format!("masks/{seq}/f{i:03}.png")), 8, 8, 255);
            }
        }
        let idx = index_dataset(dir.path(), DatasetLayout::FlatPairs).unwrap();
        assert_eq!(idx.sequences.len(), 2);
        assert_eq!(idx.sequences[0].len(), 3);
        assert_eq!(idx.kind, DatasetKind::Video);
        assert!(idx.exceptions.is_empty());
        assert_eq!(idx.fully_annotated().len(), 2);
    }

    #[test]
    fn davis_layout_and_missing_mask_reported() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_png(
                &dir.path().join(format!("JPEGImages/480p/dog/{i:05}.png")),
                8,
                8,
                10,
            );
            if i != 2 {
                write_png(
                    &dir.path().join(format!("Annotations/480p/dog/{i:05}.png")),
                    8,
                    8,
                    200,
                );
            }
        }
        let idx = index_dataset(dir.path(), DatasetLayout::Davis).unwrap();
        assert_eq!(idx.sequences.len(), 1);
        assert_eq!(idx.sequences[0].len(), 4);
        assert!(idx.sequences[0].masks[2].is_none());
        assert_eq!(idx.exceptions.len(), 1);
        assert!(idx.exceptions[0].contains("00002"));
        // still usable for inference, not fully annotated
        assert!(idx.fully_annotated().is_empty());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("frames")).unwrap();
        assert!(index_dataset(dir.path(), DatasetLayout::FlatPairs).is_err());
    }

    #[test]
    fn mask_binarization_and_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mut img = image::GrayImage::new(2, 1);
        img.put_pixel(0, 0, image::Luma([127]));
        img.put_pixel(1, 0, image::Luma([128]));
        img.save(&p).unwrap();
        let mask: Tensor<f64> = load_mask(&p).unwrap();
        assert_eq!(mask.data(), &[0.0, 1.0]);

        let map = Tensor::<f64>::new(vec![1, 1, 3], vec![0.0, 0.5002, 1.0]).unwrap();
        let mp = dir.path().join("out.png");
        save_gray_map(&mp, &map).unwrap();
        let back: Tensor<f64> = load_gray01(&mp).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert!((back.data()[1] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(back.data()[2], 1.0);
    }
}
