//! Volume ingestion, 2-D slice datasets, synthetic phantoms and checkpoints.

mod checkpoint;
mod nifti;

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, MAGIC, VERSION,
};
pub use nifti::{parse_nifti, read_nifti, NiftiDtype, NiftiImage, Volume};

use crate::error::{invalid, Error, Result};
use crate::preprocess::{histogram_equalize, resize_bilinear, resize_nearest, window_hu, WindowSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    /// `[1, S, S]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[S, S]` class labels.
    pub mask: Tensor<u8>,
    pub volume_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn has_label(&self, class: u8) -> bool {
        self.mask.data().contains(&class)
    }

    pub fn size(&self) -> usize {
        self.mask.shape()[0]
    }
}

/// How raw segmentation values become class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelMap {
    pub num_classes: usize,
    /// Raw value marking lesion voxels.
    pub lesion_label: u8,
}

impl Default for LabelMap {
    fn default() -> Self {
        Self {
            num_classes: 2,
            lesion_label: 2,
        }
    }
}

impl LabelMap {
    /// With two classes the mask is `raw == lesion_label`; otherwise raw
    /// values are used as class indices.
    pub fn map(&self, raw: f32) -> Option<u8> {
        if raw < 0.0 || raw.fract() != 0.0 || raw > 255.0 {
            return None;
        }
        let v = raw as u8;
        if self.num_classes == 2 {
            Some(u8::from(v == self.lesion_label))
        } else if (v as usize) < self.num_classes {
            Some(v)
        } else {
            None
        }
    }

    /// Class index of the lesion after mapping.
    pub fn lesion_class(&self) -> u8 {
        if self.num_classes == 2 {
            1
        } else {
            self.lesion_label
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || (self.num_classes > 2 && self.lesion_label as usize >= self.num_classes) {
            return Err(invalid(
                "label_map",
                format!("lesion label {} with {} classes", self.lesion_label, self.num_classes),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceFilter {
    All,
    /// Slices containing lesion plus `k` neighbours on each side.
    LesionNeighbors(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceConfig {
    pub window: WindowSpec,
    pub resize: usize,
    pub bins: usize,
    pub filter: SliceFilter,
    pub labels: LabelMap,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            window: WindowSpec::default(),
            resize: 256,
            bins: 256,
            filter: SliceFilter::LesionNeighbors(2),
            labels: LabelMap::default(),
        }
    }
}

/// Image and segmentation volume of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumePair {
    pub id: String,
    pub image: Volume,
    pub mask: Volume,
}

/// Numeric ids sort numerically, the rest lexically after them.
pub fn volume_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Window, equalize and resize one axial plane into `[1, S, S]`.
pub fn prepare_image(plane_hu: &Tensor<f32>, window: WindowSpec, bins: usize, size: usize) -> Result<Tensor<f32>> {
    let eq = histogram_equalize(&window_hu(plane_hu, window), bins)?;
    let resized = resize_bilinear(&eq, size, size)?;
    resized.reshape(&[1, size, size])
}

/// Axial slices of every pair in `(volume id, slice index)` order.
pub fn build_slice_dataset(volumes: &[VolumePair], config: &SliceConfig) -> Result<Vec<SliceSample>> {
    config.labels.validate()?;
    let mut order: Vec<&VolumePair> = volumes.iter().collect();
    order.sort_by(|a, b| volume_order(&a.id, &b.id));
    let lesion = config.labels.lesion_class();
    let mut out = Vec::new();
    for pair in order {
        if pair.image.dims != pair.mask.dims {
            return Err(Error::Dataset {
                volume: pair.id.clone(),
                reason: format!("image dims {:?} differ from mask dims {:?}", pair.image.dims, pair.mask.dims),
            });
        }
        let depth = pair.image.depth();
        let mut labels = Vec::with_capacity(depth);
        for z in 0..depth {
            let raw = pair.mask.slice(z);
            let mut data = Vec::with_capacity(raw.numel());
            for &v in raw.data() {
                data.push(config.labels.map(v).ok_or_else(|| Error::Dataset {
                    volume: pair.id.clone(),
                    reason: format!("slice {z}: mask value {v} is not a valid label"),
                })?);
            }
            labels.push(Tensor::new(raw.shape(), data)?);
        }
        let lesion_slices: Vec<usize> = (0..depth).filter(|&z| labels[z].data().contains(&lesion)).collect();
        for (z, label) in labels.into_iter().enumerate() {
            let keep = match config.filter {
                SliceFilter::All => true,
                SliceFilter::LesionNeighbors(k) => lesion_slices.iter().any(|&l| l.abs_diff(z) <= k),
            };
            if !keep {
                continue;
            }
            out.push(SliceSample {
                image: prepare_image(&pair.image.slice(z), config.window, config.bins, config.resize)?,
                mask: resize_nearest(&label, config.resize, config.resize)?,
                volume_id: pair.id.clone(),
                slice_index: z,
            });
        }
    }
    Ok(out)
}

/// Paths of one scan inside a data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeFiles {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

/// Find `volume-<id>.nii` files and their `segmentation-<id>.nii` masks.
pub fn discover_volumes(dir: &Path) -> Result<Vec<VolumeFiles>> {
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(".nii") else {
            continue;
        };
        if let Some(id) = stem.strip_prefix("volume-") {
            images.push((id.to_string(), path.clone()));
        } else if let Some(id) = stem.strip_prefix("segmentation-") {
            masks.push(id.to_string());
        }
    }
    images.sort_by(|a, b| volume_order(&a.0, &b.0));
    Ok(images
        .into_iter()
        .map(|(id, image)| {
            let mask = masks.contains(&id).then(|| dir.join(format!("segmentation-{id}.nii")));
            VolumeFiles { id, image, mask }
        })
        .collect())
}

/// Read every discovered pair; a missing mask is an error naming the volume.
pub fn load_volume_pairs(dir: &Path) -> Result<Vec<VolumePair>> {
    let files = discover_volumes(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset {
            volume: dir.display().to_string(),
            reason: "no volume-<id>.nii files found".to_string(),
        });
    }
    files
        .into_iter()
        .map(|f| {
            let mask_path = f.mask.ok_or_else(|| Error::Dataset {
                volume: f.id.clone(),
                reason: format!("missing mask segmentation-{}.nii", f.id),
            })?;
            let with_id = |e: Error| match e {
                Error::Nifti { field, reason } => Error::Nifti {
                    field,
                    reason: format!("{reason} (volume {})", f.id),
                },
                other => other,
            };
            Ok(VolumePair {
                image: read_nifti(&f.image).map_err(with_id)?,
                mask: read_nifti(&mask_path).map_err(with_id)?,
                id: f.id,
            })
        })
        .collect()
}

/// Radii bounds of phantom ellipses as fractions of the side length; the
/// area fraction `π·a·b/S²` stays inside `[2.5%, 18.1%]`.
pub const PHANTOM_RADIUS: (f64, f64) = (0.09, 0.24);

/// `n` synthetic slices of side `size`: a smooth background with one
/// brighter ellipse whose interior is the lesion mask.
pub fn generate_phantom(rng: &mut Rng, size: usize, n: usize) -> Result<Vec<SliceSample>> {
    if size == 0 || size % 16 != 0 {
        return Err(Error::Indivisible {
            height: size,
            width: size,
        });
    }
    let s = size as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base = rng.uniform_range(0.2, 0.35);
        let amp = rng.uniform_range(0.03, 0.08);
        let (fy, fx) = (rng.uniform_range(0.5, 1.5), rng.uniform_range(0.5, 1.5));
        let (py, px) = (rng.uniform_range(0.0, 2.0 * PI), rng.uniform_range(0.0, 2.0 * PI));
        let a = rng.uniform_range(PHANTOM_RADIUS.0 * s, PHANTOM_RADIUS.1 * s);
        let b = rng.uniform_range(PHANTOM_RADIUS.0 * s, PHANTOM_RADIUS.1 * s);
        let theta = rng.uniform_range(0.0, PI);
        let r = a.max(b);
        let cy = rng.uniform_range(r + 1.0, s - 2.0 - r);
        let cx = rng.uniform_range(r + 1.0, s - 2.0 - r);
        let contrast = rng.uniform_range(0.3, 0.4);
        let (sin, cos) = theta.sin_cos();
        let mut image = Vec::with_capacity(size * size);
        let mut mask = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                let inside = u * u + v * v <= 1.0;
                let bg = base + amp * (2.0 * PI * fy * y as f64 / s + py).sin() * (2.0 * PI * fx * x as f64 / s + px).cos();
                let value = bg + if inside { contrast } else { 0.0 } + 0.02 * rng.normal();
                image.push(value.clamp(0.0, 1.0) as f32);
                mask.push(u8::from(inside));
            }
        }
        out.push(SliceSample {
            image: Tensor::new(&[1, size, size], image)?,
            mask: Tensor::new(&[size, size], mask)?,
            volume_id: format!("phantom-{i:04}"),
            slice_index: 0,
        });
    }
    Ok(out)
}

/// `volume_id,slice_index,has_lesion` rows.
pub fn manifest(samples: &[SliceSample], lesion_class: u8) -> String {
    let mut out = String::from("volume_id,slice_index,has_lesion\n");
    for s in samples {
        let _ = writeln!(out, "{},{},{}", s.volume_id, s.slice_index, u8::from(s.has_label(lesion_class)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::paper_score;

    fn pair(id: &str, depth: usize, lesion_at: &[usize]) -> VolumePair {
        let dims = [8, 6, depth];
        let raw: Vec<f64> = (0..8 * 6 * depth).map(|i| ((i * 53) % 400) as f64 - 150.0).collect();
        let seg: Vec<f64> = (0..8 * 6 * depth)
            .map(|i| {
                let z = i / 48;
                if lesion_at.contains(&z) && i % 48 == 20 {
                    2.0
                } else if i % 3 == 0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        VolumePair {
            id: id.to_string(),
            image: parse_nifti(&NiftiImage::new(dims, NiftiDtype::I16, raw).encode()).unwrap(),
            mask: parse_nifti(&NiftiImage::new(dims, NiftiDtype::U8, seg).encode()).unwrap(),
        }
    }

    fn config(filter: SliceFilter) -> SliceConfig {
        SliceConfig {
            resize: 16,
            filter,
            ..SliceConfig::default()
        }
    }

    #[test]
    fn all_filter_keeps_every_slice_in_order() {
        let samples = build_slice_dataset(&[pair("3", 5, &[2])], &config(SliceFilter::All)).unwrap();
        assert_eq!(samples.iter().map(|s| s.slice_index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        for s in &samples {
            assert_eq!(s.image.shape(), &[1, 16, 16]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.data().iter().all(|&v| v <= 1));
        }
        assert!(samples[2].has_label(1));
        assert!(!samples[1].has_label(1));
    }

    #[test]
    fn lesion_filter() {
        let none = build_slice_dataset(&[pair("1", 5, &[])], &config(SliceFilter::LesionNeighbors(0))).unwrap();
        assert!(none.is_empty());
        let near = build_slice_dataset(&[pair("1", 7, &[3])], &config(SliceFilter::LesionNeighbors(1))).unwrap();
        assert_eq!(near.iter().map(|s| s.slice_index).collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn ordering_ignores_input_order() {
        let cfg = config(SliceFilter::All);
        let a = build_slice_dataset(&[pair("10", 2, &[]), pair("2", 2, &[])], &cfg).unwrap();
        let b = build_slice_dataset(&[pair("2", 2, &[]), pair("10", 2, &[])], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].volume_id, "2");
    }

    #[test]
    fn three_class_labels_pass_through() {
        let cfg = SliceConfig {
            labels: LabelMap {
                num_classes: 3,
                lesion_label: 2,
            },
            ..config(SliceFilter::All)
        };
        let s = build_slice_dataset(&[pair("1", 2, &[1])], &cfg).unwrap();
        assert!(s[1].has_label(2) && s[1].has_label(1));
    }

    #[test]
    fn dim_mismatch_names_volume() {
        let mut p = pair("7", 3, &[]);
        p.mask = pair("7", 2, &[]).mask;
        match build_slice_dataset(&[p], &config(SliceFilter::All)) {
            Err(Error::Dataset { volume, .. }) => assert_eq!(volume, "7"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn phantom_contract() {
        let samples = generate_phantom(&mut Rng::new(1, 5), 64, 8).unwrap();
        assert_eq!(samples.len(), 8);
        for s in &samples {
            let area = s.mask.data().iter().filter(|&&v| v == 1).count() as f64 / (64.0 * 64.0);
            assert!((0.02..=0.20).contains(&area), "{area}");
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(paper_score(&s.mask, &s.mask).unwrap(), 1.0);
        }
        assert_eq!(samples, generate_phantom(&mut Rng::new(1, 5), 64, 8).unwrap());
        assert!(generate_phantom(&mut Rng::new(1, 5), 60, 1).is_err());
    }

    #[test]
    fn discovery_reports_missing_masks() {
        let dir = tempfile::tempdir().unwrap();
        let p = pair("0", 2, &[1]);
        let img = NiftiImage::new(p.image.dims, NiftiDtype::I16, vec![0.0; 96]);
        img.write(&dir.path().join("volume-0.nii")).unwrap();
        img.write(&dir.path().join("segmentation-0.nii")).unwrap();
        img.write(&dir.path().join("volume-1.nii")).unwrap();
        let files = discover_volumes(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[1].mask.is_none());
        match load_volume_pairs(dir.path()) {
            Err(Error::Dataset { volume, reason }) => {
                assert_eq!(volume, "1");
                assert!(reason.contains("segmentation-1.nii"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_rows() {
        let samples = generate_phantom(&mut Rng::new(2, 5), 16, 2).unwrap();
        let m = manifest(&samples, 1);
        assert_eq!(m.lines().next(), Some("volume_id,slice_index,has_lesion"));
        assert_eq!(m.lines().nth(1), Some("phantom-0000,0,1"));
    }
}
