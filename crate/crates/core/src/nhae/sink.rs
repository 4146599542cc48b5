use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::{header_path, write_raw_header, Image, ValueRange, Volume};
use crate::error::{Error, Result};

/// Ordered consumer of decoded depth slices.
pub trait VolumeSink {
    fn begin(&mut self, shape: [usize; 3]) -> Result<()>;
    /// Called once per slice in increasing `index` order.
    fn write_slice(&mut self, index: usize, slice: &Image) -> Result<()>;
    fn finish(&mut self) -> Result<()>;
    /// Called instead of `finish` when decoding fails part-way.
    fn abort(&mut self) {}
}

fn check_order(expected: usize, index: usize, shape: [usize; 3], slice: &Image) -> Result<()> {
    if index != expected {
        return Err(Error::validation(format!(
            "slice {index} written out of order (expected {expected})"
        )));
    }
    if index >= shape[0] || slice.height != shape[1] || slice.width != shape[2] {
        return Err(Error::validation(format!(
            "slice {index} of {}×{} does not fit volume {shape:?}",
            slice.height, slice.width
        )));
    }
    Ok(())
}

/// Assembles the volume in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    shape: [usize; 3],
    data: Vec<f32>,
    next: usize,
    complete: bool,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_volume(self) -> Result<Volume> {
        if !self.complete {
            return Err(Error::validation("volume sink was not finished"));
        }
        Volume::from_clamped(self.shape, self.data)
    }
}

impl VolumeSink for MemorySink {
    fn begin(&mut self, shape: [usize; 3]) -> Result<()> {
        self.shape = shape;
        self.data = Vec::with_capacity(shape.iter().product());
        self.next = 0;
        self.complete = false;
        Ok(())
    }

    fn write_slice(&mut self, index: usize, slice: &Image) -> Result<()> {
        check_order(self.next, index, self.shape, slice)?;
        self.data.extend_from_slice(&slice.pixels);
        self.next += 1;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if self.next != self.shape[0] {
            return Err(Error::validation(format!(
                "sink received {} of {} slices",
                self.next, self.shape[0]
            )));
        }
        self.complete = true;
        Ok(())
    }
}

/// Streams slices into a raw f32 volume file.
///
/// The payload is written to `<path>.partial` and only renamed, with its header
/// written, on `finish`. An aborted or failed run leaves the `.partial` file and
/// no header, so it never loads as a volume.
#[derive(Debug)]
pub struct RawFileSink {
    path: PathBuf,
    partial: PathBuf,
    writer: Option<BufWriter<File>>,
    shape: [usize; 3],
    next: usize,
}

impl RawFileSink {
    pub fn new(path: &Path) -> Self {
        let mut partial = path.as_os_str().to_owned();
        partial.push(".partial");
        Self {
            path: path.to_path_buf(),
            partial: PathBuf::from(partial),
            writer: None,
            shape: [0; 3],
            next: 0,
        }
    }

    pub fn partial_path(&self) -> &Path {
        &self.partial
    }
}

impl VolumeSink for RawFileSink {
    fn begin(&mut self, shape: [usize; 3]) -> Result<()> {
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let _ = std::fs::remove_file(header_path(&self.path));
        let file = File::create(&self.partial).map_err(|e| Error::io(&self.partial, e))?;
        self.writer = Some(BufWriter::new(file));
        self.shape = shape;
        self.next = 0;
        Ok(())
    }

    fn write_slice(&mut self, index: usize, slice: &Image) -> Result<()> {
        check_order(self.next, index, self.shape, slice)?;
        let writer = self
            .writer
            .as_mut()
            .ok_or_else(|| Error::validation("write before begin"))?;
        let mut bytes = Vec::with_capacity(slice.pixels.len() * 4);
        for v in &slice.pixels {
            bytes.extend_from_slice(&v.clamp(-1.0, 1.0).to_le_bytes());
        }
        writer.write_all(&bytes).map_err(|e| Error::io(&self.partial, e))?;
        self.next += 1;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        let mut writer = self
            .writer
            .take()
            .ok_or_else(|| Error::validation("finish before begin"))?;
        if self.next != self.shape[0] {
            return Err(Error::validation(format!(
                "sink received {} of {} slices",
                self.next, self.shape[0]
            )));
        }
        writer.flush().map_err(|e| Error::io(&self.partial, e))?;
        drop(writer);
        std::fs::rename(&self.partial, &self.path).map_err(|e| Error::io(&self.path, e))?;
        write_raw_header(&self.path, self.shape, ValueRange::CANONICAL)
    }

    fn abort(&mut self) {
        if let Some(mut w) = self.writer.take() {
            let _ = w.flush();
        }
    }
}

/// Discards slices, counting them.
#[derive(Debug, Default)]
pub struct NullSink {
    pub slices: usize,
}

impl VolumeSink for NullSink {
    fn begin(&mut self, _shape: [usize; 3]) -> Result<()> {
        self.slices = 0;
        Ok(())
    }

    fn write_slice(&mut self, _index: usize, _slice: &Image) -> Result<()> {
        self.slices += 1;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_volume, VolumeLayout};

    fn ramp(i: usize) -> Image {
        Image {
            height: 2,
            width: 3,
            pixels: (0..6).map(|p| (i * 6 + p) as f32 / 20.0 - 0.5).collect(),
        }
    }

    #[test]
    fn file_sink_streams_a_loadable_volume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let mut sink = RawFileSink::new(&path);
        let mut mem = MemorySink::new();
        for s in [&mut sink as &mut dyn VolumeSink, &mut mem] {
            s.begin([3, 2, 3]).unwrap();
            for i in 0..3 {
                s.write_slice(i, &ramp(i)).unwrap();
            }
            s.finish().unwrap();
        }
        let loaded = load_volume(&path, VolumeLayout::Raw).unwrap();
        assert_eq!(loaded, mem.into_volume().unwrap());
        assert!(!sink.partial_path().exists());
    }

    #[test]
    fn aborted_file_sink_is_not_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let mut sink = RawFileSink::new(&path);
        sink.begin([3, 2, 3]).unwrap();
        sink.write_slice(0, &ramp(0)).unwrap();
        sink.abort();
        assert!(sink.partial_path().exists());
        assert!(load_volume(&path, VolumeLayout::Raw).is_err());
    }

    #[test]
    fn out_of_order_and_short_writes_fail() {
        let mut mem = MemorySink::new();
        mem.begin([2, 2, 3]).unwrap();
        assert!(mem.write_slice(1, &ramp(1)).is_err());
        mem.write_slice(0, &ramp(0)).unwrap();
        assert!(mem.finish().is_err());
    }

    #[test]
    fn unwritable_destination_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let mut sink = RawFileSink::new(&blocker.join("v.raw"));
        assert!(matches!(sink.begin([1, 2, 3]), Err(Error::Io { .. })));
    }
}
