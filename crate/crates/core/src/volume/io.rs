//! Stack and mask file formats.
//!
//! Raw volumes are little-endian samples, x fastest, then y, then z, with a
//! JSON sidecar next to them (`volume.raw` + `volume.json`). A directory of
//! 8/16-bit grayscale images is read as a stack in lexicographic filename order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{check_dims, BinaryMask, Mask2d, SliceAnnotation, VoxelVolume, DEFAULT_SPACING_UM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    Uint8,
    Uint16,
    /// Intensities already normalized to `[0, 1]`; loaded verbatim.
    Float32,
}

impl SampleType {
    fn bytes(self) -> usize {
        match self {
            SampleType::Uint8 => 1,
            SampleType::Uint16 => 2,
            SampleType::Float32 => 4,
        }
    }
}

/// Either one edge length or three per-axis lengths; only isotropic grids load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Spacing {
    Isotropic(f64),
    PerAxis([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dtype: SampleType,
    pub spacing_um: Spacing,
}

impl Sidecar {
    pub fn isotropic(nx: usize, ny: usize, nz: usize, dtype: SampleType, spacing_um: f64) -> Self {
        Self {
            nx,
            ny,
            nz,
            dtype,
            spacing_um: Spacing::Isotropic(spacing_um),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Descriptor {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn spacing(&self, path: &Path) -> Result<f64> {
        let s = match self.spacing_um {
            Spacing::Isotropic(s) => s,
            Spacing::PerAxis([a, b, c]) => {
                if a != b || b != c {
                    return Err(Error::Descriptor {
                        path: path.to_path_buf(),
                        message: format!("anisotropic spacing [{a}, {b}, {c}] is not supported"),
                    });
                }
                a
            }
        };
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Descriptor {
                path: path.to_path_buf(),
                message: format!("spacing_um must be positive, got {s}"),
            });
        }
        Ok(s)
    }
}

/// Sidecar location for a raw file: same stem, `.json` extension.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Loads a stack from a raw file (with sidecar) or from a directory of slice
/// images. Integer samples are min-max normalized over the whole stack.
///
/// For image directories `meta`, when given, supplies the spacing; otherwise
/// the default 3 um spacing is used.
pub fn load_stack(path: &Path, meta: Option<&Path>) -> Result<VoxelVolume> {
    if path.is_dir() {
        let spacing = match meta {
            Some(m) => Sidecar::read(m)?.spacing(m)?,
            None => DEFAULT_SPACING_UM,
        };
        return load_image_dir(path, spacing);
    }
    let meta_path = meta.map(Path::to_path_buf).unwrap_or_else(|| sidecar_path(path));
    let sidecar = Sidecar::read(&meta_path)?;
    let spacing = sidecar.spacing(&meta_path)?;
    check_dims(sidecar.nx, sidecar.ny, sidecar.nz)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let declared = sidecar.nx * sidecar.ny * sidecar.nz;
    let width = sidecar.dtype.bytes();
    if bytes.len() % width != 0 || bytes.len() / width != declared {
        return Err(Error::VoxelCountMismatch {
            declared,
            actual: bytes.len() / width,
        });
    }
    match sidecar.dtype {
        SampleType::Uint8 => {
            let samples: Vec<f64> = bytes.iter().map(|&b| b as f64).collect();
            VoxelVolume::from_raw_samples(sidecar.nx, sidecar.ny, sidecar.nz, spacing, &samples)
        }
        SampleType::Uint16 => {
            let samples: Vec<f64> = bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
                .collect();
            VoxelVolume::from_raw_samples(sidecar.nx, sidecar.ny, sidecar.nz, spacing, &samples)
        }
        SampleType::Float32 => {
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            VoxelVolume::new(sidecar.nx, sidecar.ny, sidecar.nz, spacing, data)
        }
    }
}

fn is_slice_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "tif" | "tiff")
    )
}

fn load_image_dir(dir: &Path, spacing: f64) -> Result<VoxelVolume> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_slice_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Image {
            path: dir.to_path_buf(),
            message: "no slice images found".into(),
        });
    }
    let mut dims: Option<(u32, u32)> = None;
    let mut samples = Vec::new();
    for file in &files {
        let img = image::open(file).map_err(|e| Error::Image {
            path: file.clone(),
            message: e.to_string(),
        })?;
        let (w, h) = (img.width(), img.height());
        match dims {
            None => dims = Some((w, h)),
            Some((w0, h0)) if (w0, h0) != (w, h) => {
                return Err(Error::DimensionMismatch(format!(
                    "slice {} is {w}x{h}, earlier slices are {w0}x{h0}",
                    file.display()
                )))
            }
            _ => {}
        }
        match img {
            image::DynamicImage::ImageLuma8(buf) => {
                samples.extend(buf.into_raw().into_iter().map(|v| v as f64))
            }
            image::DynamicImage::ImageLuma16(buf) => {
                samples.extend(buf.into_raw().into_iter().map(|v| v as f64))
            }
            other => {
                return Err(Error::Image {
                    path: file.clone(),
                    message: format!("unsupported pixel format {:?}", other.color()),
                })
            }
        }
    }
    let (w, h) = dims.expect("at least one slice");
    VoxelVolume::from_raw_samples(w as usize, h as usize, files.len(), spacing, &samples)
}

/// Writes a volume as float32 samples plus sidecar.
pub fn save_volume(volume: &VoxelVolume, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(volume.len() * 4);
    for v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let (nx, ny, nz) = volume.dims();
    Sidecar::isotropic(nx, ny, nz, SampleType::Float32, volume.spacing_um())
        .write(&sidecar_path(path))
}

/// Writes one byte per voxel (0 or 255) plus sidecar.
pub fn save_mask(mask: &BinaryMask, spacing_um: f64, path: &Path) -> Result<()> {
    let (nx, ny, nz) = mask.dims();
    check_dims(nx, ny, nz)?;
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Sidecar::isotropic(nx, ny, nz, SampleType::Uint8, spacing_um).write(&sidecar_path(path))
}

/// Reads a mask written by [`save_mask`]; any nonzero byte is set.
/// Returns the mask and its spacing.
pub fn load_mask(path: &Path) -> Result<(BinaryMask, f64)> {
    let meta = sidecar_path(path);
    let sidecar = Sidecar::read(&meta)?;
    let spacing = sidecar.spacing(&meta)?;
    if sidecar.dtype != SampleType::Uint8 {
        return Err(Error::Descriptor {
            path: meta,
            message: "masks must be stored as uint8".into(),
        });
    }
    check_dims(sidecar.nx, sidecar.ny, sidecar.nz)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let declared = sidecar.nx * sidecar.ny * sidecar.nz;
    if bytes.len() != declared {
        return Err(Error::VoxelCountMismatch {
            declared,
            actual: bytes.len(),
        });
    }
    let mask = BinaryMask::new(
        sidecar.nx,
        sidecar.ny,
        sidecar.nz,
        bytes.into_iter().map(|b| b != 0).collect(),
    )?;
    Ok((mask, spacing))
}

/// Reads a 2D mask from a PNG/TIFF image or a raw byte file of `nx * ny` bytes.
pub fn load_mask_2d(path: &Path, nx: usize, ny: usize) -> Result<Mask2d> {
    let is_raw = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("raw"))
        .unwrap_or(false);
    if is_raw {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != nx * ny {
            return Err(Error::VoxelCountMismatch {
                declared: nx * ny,
                actual: bytes.len(),
            });
        }
        return Mask2d::new(nx, ny, bytes.into_iter().map(|b| b != 0).collect());
    }
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if img.width() as usize != nx || img.height() as usize != ny {
        return Err(Error::DimensionMismatch(format!(
            "{} is {}x{}, expected {nx}x{ny}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let gray = img.into_luma8();
    Mask2d::new(nx, ny, gray.into_raw().into_iter().map(|b| b != 0).collect())
}

pub fn save_mask_2d_png(mask: &Mask2d, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.nx as u32, mask.ny as u32, bytes)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub z: usize,
    /// Sample mask file, relative to the manifest.
    pub sample: String,
    /// Lipid mask file, relative to the manifest.
    pub lipid: String,
}

/// JSON index of annotated slices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationManifest {
    pub nx: usize,
    pub ny: usize,
    pub slices: Vec<AnnotationEntry>,
}

/// Loads every annotated slice listed in a manifest, sorted by z.
pub fn load_annotations(manifest_path: &Path) -> Result<Vec<SliceAnnotation>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: AnnotationManifest =
        serde_json::from_str(&text).map_err(|e| Error::Descriptor {
            path: manifest_path.to_path_buf(),
            message: e.to_string(),
        })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::with_capacity(manifest.slices.len());
    for entry in &manifest.slices {
        let sample = load_mask_2d(&base.join(&entry.sample), manifest.nx, manifest.ny)?;
        let lipid = load_mask_2d(&base.join(&entry.lipid), manifest.nx, manifest.ny)?;
        out.push(SliceAnnotation::new(entry.z, sample, lipid)?);
    }
    out.sort_by_key(|a| a.z);
    Ok(out)
}

/// Writes annotations as PNG pairs plus `annotations.json` into `dir`.
pub fn save_annotations(dir: &Path, annotations: &[SliceAnnotation]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (nx, ny) = annotations
        .first()
        .map(|a| (a.sample.nx, a.sample.ny))
        .unwrap_or((0, 0));
    let mut slices = Vec::with_capacity(annotations.len());
    for a in annotations {
        let sample = format!("sample_{:05}.png", a.z);
        let lipid = format!("lipid_{:05}.png", a.z);
        save_mask_2d_png(&a.sample, &dir.join(&sample))?;
        save_mask_2d_png(&a.lipid, &dir.join(&lipid))?;
        slices.push(AnnotationEntry {
            z: a.z,
            sample,
            lipid,
        });
    }
    let manifest = AnnotationManifest { nx, ny, slices };
    let path = dir.join("annotations.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, name: &str, bytes: &[u8], sidecar: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        fs::write(sidecar_path(&p), sidecar).unwrap();
        p
    }

    #[test]
    fn loads_and_normalizes_uint8_stack() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(
            dir.path(),
            "v.raw",
            &[0, 255, 128, 128, 0, 0, 255, 255],
            r#"{"nx":2,"ny":2,"nz":2,"dtype":"uint8","spacing_um":3.0}"#,
        );
        let v = load_stack(&p, None).unwrap();
        let expected = [0.0, 1.0, 128.0 / 255.0, 128.0 / 255.0, 0.0, 0.0, 1.0, 1.0];
        for (a, b) in v.data().iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert!((v.data()[2] as f64 - 0.502).abs() < 1e-3);
        assert_eq!(v.spacing_um(), 3.0);
    }

    #[test]
    fn all_zero_stack_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(
            dir.path(),
            "z.raw",
            &[0; 8],
            r#"{"nx":2,"ny":2,"nz":2,"dtype":"uint8","spacing_um":3.0}"#,
        );
        assert!(load_stack(&p, None).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn voxel_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(
            dir.path(),
            "m.raw",
            &[1u8; 999],
            r#"{"nx":10,"ny":10,"nz":10,"dtype":"uint8","spacing_um":3.0}"#,
        );
        let err = load_stack(&p, None).unwrap_err();
        assert!(err.to_string().contains("voxel count mismatch"), "{err}");
    }

    #[test]
    fn missing_sidecar_field_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(
            dir.path(),
            "f.raw",
            &[0u8; 8],
            r#"{"nx":2,"ny":2,"dtype":"uint8","spacing_um":3.0}"#,
        );
        assert!(matches!(load_stack(&p, None), Err(Error::Descriptor { .. })));
    }

    #[test]
    fn anisotropic_spacing_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(
            dir.path(),
            "a.raw",
            &[0u8; 8],
            r#"{"nx":2,"ny":2,"nz":2,"dtype":"uint8","spacing_um":[3.0,3.0,6.0]}"#,
        );
        let err = load_stack(&p, None).unwrap_err();
        assert!(err.to_string().contains("anisotropic"), "{err}");
    }

    #[test]
    fn uint16_samples_are_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_raw(
            dir.path(),
            "w.raw",
            &[0, 0, 0, 1, 0, 2],
            r#"{"nx":3,"ny":1,"nz":1,"dtype":"uint16","spacing_um":1.5}"#,
        );
        let v = load_stack(&p, None).unwrap();
        assert_eq!(v.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn all_true_mask_is_255_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.raw");
        let m = BinaryMask::new(4, 4, 4, vec![true; 64]).unwrap();
        save_mask(&m, 3.0, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 64);
        assert!(bytes.iter().all(|&b| b == 255));
        assert_eq!(load_mask(&p).unwrap().0, m);
    }

    #[test]
    fn degenerate_mask_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::empty(0, 4, 4);
        let err = save_mask(&m, 3.0, &dir.path().join("d.raw")).unwrap_err();
        assert!(err.to_string().contains("degenerate dimensions"));
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let m = BinaryMask::new(1, 1, 1, vec![true]).unwrap();
        assert!(matches!(
            save_mask(&m, 3.0, Path::new("/nonexistent-dir/x/m.raw")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn image_directory_stack_in_filename_order() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("b.png", 200u8), ("a.png", 100u8)] {
            image::GrayImage::from_raw(2, 2, vec![v, 0, v, 0])
                .unwrap()
                .save(dir.path().join(name))
                .unwrap();
        }
        let v = load_stack(dir.path(), None).unwrap();
        assert_eq!(v.dims(), (2, 2, 2));
        assert!((v.get(0, 0, 0) - 0.5).abs() < 1e-6);
        assert_eq!(v.get(0, 0, 1), 1.0);
        assert_eq!(v.spacing_um(), DEFAULT_SPACING_UM);
    }

    #[test]
    fn image_directory_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        image::GrayImage::new(2, 2).save(dir.path().join("a.png")).unwrap();
        image::GrayImage::new(3, 2).save(dir.path().join("b.png")).unwrap();
        assert!(matches!(
            load_stack(dir.path(), None),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sample = Mask2d::new(3, 2, vec![true, true, false, true, true, false]).unwrap();
        let lipid = Mask2d::new(3, 2, vec![false, true, false, false, false, false]).unwrap();
        let ann = vec![SliceAnnotation::new(4, sample, lipid).unwrap()];
        let manifest = save_annotations(dir.path(), &ann).unwrap();
        assert_eq!(load_annotations(&manifest).unwrap(), ann);
    }
}
