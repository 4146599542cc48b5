//! On-disk volume formats.
//!
//! Raw layout: a little-endian payload file plus a plain-text sidecar with the
//! same stem and a `.hdr` extension:
//!
//! ```text
//! shape=D,H,W
//! dtype=f32
//! range=lo,hi
//! ```
//!
//! Label volumes use the same layout with `dtype=u8` and an extra `classes=N` line.
//! The slice-directory layout stores one 8-bit grayscale `slice_NNNN.png` per depth index.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use super::{LabelVolume, ValueRange, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeLayout {
    /// Raw f32 payload with a sidecar header.
    Raw,
    /// Directory of `slice_NNNN.png` grayscale images ordered along depth.
    SliceDir,
}

impl VolumeLayout {
    /// Picks the layout from what exists at `path`: directories are slice stacks.
    pub fn detect(path: &Path) -> Self {
        if path.is_dir() {
            VolumeLayout::SliceDir
        } else {
            VolumeLayout::Raw
        }
    }
}

pub fn header_path(payload: &Path) -> PathBuf {
    payload.with_extension("hdr")
}

struct Header {
    shape: [usize; 3],
    dtype: String,
    range: Option<(f32, f32)>,
    classes: Option<u8>,
}

fn invalid_data(path: &Path, msg: String) -> Error {
    Error::io(path, std::io::Error::new(ErrorKind::InvalidData, msg))
}

fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut shape = None;
    let mut dtype = None;
    let mut range = None;
    let mut classes = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| invalid_data(path, format!("malformed header line `{line}`")))?;
        match key.trim() {
            "shape" => {
                let dims: Vec<usize> = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| invalid_data(path, format!("bad shape `{value}`: {e}")))?;
                let dims: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| invalid_data(path, format!("shape `{value}` is not 3-D")))?;
                shape = Some(dims);
            }
            "dtype" => dtype = Some(value.trim().to_string()),
            "range" => {
                let parts: Vec<f32> = value
                    .split(',')
                    .map(|s| s.trim().parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| invalid_data(path, format!("bad range `{value}`: {e}")))?;
                if parts.len() != 2 {
                    return Err(invalid_data(path, format!("range `{value}` needs two values")));
                }
                range = Some((parts[0], parts[1]));
            }
            "classes" => {
                classes = Some(
                    value
                        .trim()
                        .parse::<u8>()
                        .map_err(|e| invalid_data(path, format!("bad class count: {e}")))?,
                )
            }
            _ => {}
        }
    }
    Ok(Header {
        shape: shape.ok_or_else(|| invalid_data(path, "header lacks shape".into()))?,
        dtype: dtype.unwrap_or_else(|| "f32".into()),
        range,
        classes,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_volume(v: &Volume, path: &Path, layout: VolumeLayout) -> Result<()> {
    if let Some(i) = v.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::validation(format!("refusing to save non-finite voxel at {i}")));
    }
    match layout {
        VolumeLayout::Raw => save_raw(v, path),
        VolumeLayout::SliceDir => save_slices(v, path),
    }
}

pub fn load_volume(path: &Path, layout: VolumeLayout) -> Result<Volume> {
    match layout {
        VolumeLayout::Raw => load_raw(path),
        VolumeLayout::SliceDir => load_slices(path),
    }
}

/// Writes the sidecar header of a raw f32 volume whose payload lives at `payload`.
pub fn write_raw_header(payload: &Path, shape: [usize; 3], range: ValueRange) -> Result<()> {
    let [d, h, w] = shape;
    let header = format!("shape={d},{h},{w}\ndtype=f32\nrange={},{}\n", range.lo, range.hi);
    write_file(&header_path(payload), header.as_bytes())
}

fn save_raw(v: &Volume, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path, &bytes)?;
    write_raw_header(path, v.shape(), v.range())
}

fn load_raw(path: &Path) -> Result<Volume> {
    let header = read_header(&header_path(path))?;
    if header.dtype != "f32" {
        return Err(invalid_data(path, format!("expected dtype f32, found {}", header.dtype)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(invalid_data(
            path,
            format!(
                "payload is {} bytes but shape {:?} needs {}",
                bytes.len(),
                header.shape,
                n * 4
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::validation(format!(
            "{}: non-finite voxel at flat index {i}",
            path.display()
        )));
    }
    let (lo, hi) = header.range.unwrap_or((-1.0, 1.0));
    if (lo, hi) == (-1.0, 1.0) {
        return Volume::from_clamped(header.shape, data);
    }
    let raw = Volume::with_range(
        header.shape,
        data,
        ValueRange::new(f32::MIN, f32::MAX)?,
    )?;
    super::normalize(&raw, (lo, hi))
}

fn slice_name(i: usize) -> String {
    format!("slice_{i:04}.png")
}

fn save_slices(v: &Volume, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let [d, h, w] = v.shape();
    for z in 0..d {
        let img = v.slice(super::SliceAxis::Depth, z);
        let bytes: Vec<u8> = img
            .pixels
            .iter()
            .map(|&x| ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer length matches slice dimensions");
        let path = dir.join(slice_name(z));
        buf.save(&path)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    }
    Ok(())
}

fn load_slices(dir: &Path) -> Result<Volume> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("slice_") && n.ends_with(".png"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(invalid_data(dir, "no slice_NNNN.png files".into()));
    }
    let mut data = Vec::new();
    let mut hw = None;
    for path in &names {
        let img = image::open(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?
            .into_luma8();
        let dims = (img.height() as usize, img.width() as usize);
        match hw {
            None => hw = Some(dims),
            Some(prev) if prev != dims => {
                return Err(invalid_data(
                    path,
                    format!("slice is {dims:?}, earlier slices are {prev:?}"),
                ))
            }
            _ => {}
        }
        data.extend(img.into_raw().into_iter().map(|b| b as f32 / 127.5 - 1.0));
    }
    let (h, w) = hw.unwrap_or_default();
    Volume::from_clamped([names.len(), h, w], data)
}

pub fn save_labels(l: &LabelVolume, path: &Path) -> Result<()> {
    let [d, h, w] = l.shape();
    let header = format!("shape={d},{h},{w}\ndtype=u8\nclasses={}\n", l.class_count());
    write_file(path, l.labels())?;
    write_file(&header_path(path), header.as_bytes())
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let header = read_header(&header_path(path))?;
    if header.dtype != "u8" {
        return Err(invalid_data(path, format!("expected dtype u8, found {}", header.dtype)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n {
        return Err(invalid_data(
            path,
            format!("payload is {} bytes but shape {:?} needs {n}", bytes.len(), header.shape),
        ));
    }
    let classes = header
        .classes
        .unwrap_or_else(|| bytes.iter().copied().max().unwrap_or(0).saturating_add(1));
    LabelVolume::new(header.shape, bytes, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip_with_declared_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.raw");
        let v = Volume::filled([64, 64, 64], 0.0).unwrap();
        save_volume(&v, &path, VolumeLayout::Raw).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 64 * 64 * 64 * 4);
        let header = fs::read_to_string(header_path(&path)).unwrap();
        assert!(header.contains("shape=64,64,64"));
        assert!(header.contains("dtype=f32"));
        assert!(header.contains("range=-1,1"));
        let back = load_volume(&path, VolumeLayout::Raw).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn payload_shape_mismatch_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        save_volume(&Volume::filled([2, 2, 2], 0.5).unwrap(), &path, VolumeLayout::Raw).unwrap();
        fs::write(header_path(&path), "shape=2,2,3\ndtype=f32\nrange=-1,1\n").unwrap();
        assert!(matches!(load_volume(&path, VolumeLayout::Raw), Err(Error::Io { .. })));
    }

    #[test]
    fn non_finite_payload_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        save_volume(&Volume::filled([1, 1, 2], 0.5).unwrap(), &path, VolumeLayout::Raw).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_volume(&path, VolumeLayout::Raw), Err(Error::Validation(_))));
    }

    #[test]
    fn header_range_is_mapped_to_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u8like.raw");
        let bytes: Vec<u8> = [0f32, 127.5, 255.0].iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&path, bytes).unwrap();
        fs::write(header_path(&path), "shape=1,1,3\ndtype=f32\nrange=0,255\n").unwrap();
        let v = load_volume(&path, VolumeLayout::Raw).unwrap();
        assert_eq!(v.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn unwritable_destination_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let v = Volume::filled([1, 1, 1], 0.0).unwrap();
        let err = save_volume(&v, &blocker.join("sub/v.raw"), VolumeLayout::Raw).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn slice_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let (v, _) = generate_phantom(&PhantomSpec::desk(3)).unwrap();
        let stack = dir.path().join("stack");
        save_volume(&v, &stack, VolumeLayout::SliceDir).unwrap();
        assert!(stack.join("slice_0000.png").exists());
        assert!(stack.join("slice_0063.png").exists());
        assert_eq!(VolumeLayout::detect(&stack), VolumeLayout::SliceDir);
        let back = load_volume(&stack, VolumeLayout::SliceDir).unwrap();
        assert_eq!(back.shape(), [64, 64, 64]);
        // 8-bit quantisation step on a width-2 range
        let max_err = v
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max_err <= 1.0 / 127.5 + 1e-6, "{max_err}");
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, l) = generate_phantom(&PhantomSpec::desk(5)).unwrap();
        let path = dir.path().join("labels.raw");
        save_labels(&l, &path).unwrap();
        assert_eq!(load_labels(&path).unwrap(), l);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn raw_round_trip(
            shape in prop::array::uniform3(1usize..6),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
            let v = Volume::new(shape, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("v.raw");
            save_volume(&v, &path, VolumeLayout::Raw).unwrap();
            let back = load_volume(&path, VolumeLayout::Raw).unwrap();
            prop_assert_eq!(back.shape(), shape);
            for (a, b) in v.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
