//! Dense feature pyramids and the `.dpyr` exchange format.
//!
//! A pyramid is a stack of dense descriptor grids, coarsest first, whose
//! strides halve level by level down to a stride-1 (pixel resolution) grid.
//! Cell `(x, y)` of a stride-`s` level covers image pixels
//! `[x*s, x*s + s) x [y*s, y*s + s)`; its continuous image position is the
//! block center `(x + 0.5) * s - 0.5`, so stride 1 maps cells onto integer
//! pixel centers.
//!
//! File layout (all integers `u32`, little endian):
//!
//! ```text
//! "DPYR" | version=1 | image_width | image_height | level_count | reserved=0
//! per level: name[16] (zero padded ASCII) | stride | width | height | channels
//!            | f32 data, height*width*channels values, row-major (y, x, channel)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DPYR";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
pub const LEVEL_RECORD_LEN: usize = NAME_LEN + 16;
pub const FILE_EXTENSION: &str = "dpyr";
pub const ALLOWED_STRIDES: [u32; 5] = [1, 2, 4, 8, 16];

const NAME_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("bad magic {0:?}, expected \"DPYR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("pyramid data truncated")]
    Truncated,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("level `{level}`: non-finite descriptor value at index {index}")]
    NonFinite { level: String, index: usize },
    #[error("level `{level}`: stride {stride} is not one of 1, 2, 4, 8, 16")]
    InvalidStride { level: String, stride: u32 },
    #[error("stride chain broken at level `{level}`: {reason}")]
    StrideChain { level: String, reason: String },
    #[error("level `{level}`: {reason}")]
    Shape { level: String, reason: String },
    #[error("level name {0:?} must be 1 to 16 ASCII bytes without NUL")]
    InvalidName(String),
    #[error("pyramid has no levels")]
    NoLevels,
    #[error("no level with stride {0}")]
    NoSuchStride(u32),
    #[error("no level named `{0}`")]
    NoSuchLevel(String),
    #[error("cell ({x}, {y}) out of bounds for stride-{stride} level of {width}x{height} cells")]
    OutOfBounds {
        stride: u32,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Integer cell index on the level with the given stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellCoord {
    pub stride: u32,
    pub x: u32,
    pub y: u32,
}

impl CellCoord {
    pub fn new(stride: u32, x: u32, y: u32) -> Self {
        Self { stride, x, y }
    }
}

/// Continuous pixel position; integer values are pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageCoord {
    pub u: f64,
    pub v: f64,
}

impl ImageCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// One dense descriptor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    name: String,
    stride: u32,
    width: u32,
    height: u32,
    channels: u32,
    data: Vec<f32>,
}

impl FeatureLevel {
    /// Builds a level, checking the stride, the name, the buffer length and
    /// that every value is finite.
    pub fn new(
        name: impl Into<String>,
        stride: u32,
        width: u32,
        height: u32,
        channels: u32,
        data: Vec<f32>,
    ) -> Result<Self, PyramidError> {
        let level = Self {
            name: name.into(),
            stride,
            width,
            height,
            channels,
            data,
        };
        level.validate()?;
        Ok(level)
    }

    fn validate(&self) -> Result<(), PyramidError> {
        validate_name(&self.name)?;
        if !ALLOWED_STRIDES.contains(&self.stride) {
            return Err(PyramidError::InvalidStride {
                level: self.name.clone(),
                stride: self.stride,
            });
        }
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(self.shape_error(format!(
                "zero-sized level {}x{}x{}",
                self.width, self.height, self.channels
            )));
        }
        let expected = self.width as usize * self.height as usize * self.channels as usize;
        if self.data.len() != expected {
            return Err(self.shape_error(format!(
                "data holds {} values, expected {}x{}x{} = {}",
                self.data.len(),
                self.width,
                self.height,
                self.channels,
                expected
            )));
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(PyramidError::NonFinite {
                level: self.name.clone(),
                index,
            });
        }
        Ok(())
    }

    fn shape_error(&self, reason: String) -> PyramidError {
        PyramidError::Shape {
            level: self.name.clone(),
            reason,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height
    }

    /// Row-major cell index `y * width + x`.
    pub fn cell_index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    /// Inverse of [`cell_index`](Self::cell_index).
    pub fn cell_at_index(&self, index: usize) -> CellCoord {
        let w = self.width as usize;
        CellCoord::new(self.stride, (index % w) as u32, (index / w) as u32)
    }

    /// Descriptor by row-major cell index. Panics if out of range.
    pub fn descriptor(&self, index: usize) -> &[f32] {
        let c = self.channels as usize;
        &self.data[index * c..(index + 1) * c]
    }

    pub fn descriptor_at(&self, cell: CellCoord) -> Result<&[f32], PyramidError> {
        self.check_cell(cell)?;
        Ok(self.descriptor(self.cell_index(cell.x, cell.y)))
    }

    pub(crate) fn check_cell(&self, cell: CellCoord) -> Result<(), PyramidError> {
        if cell.stride != self.stride || !self.contains(cell.x, cell.y) {
            return Err(PyramidError::OutOfBounds {
                stride: cell.stride,
                x: cell.x,
                y: cell.y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Cells `{k*x .. k*x+k-1} x {k*y .. k*y+k-1}` of this level, clipped to
    /// bounds, in row-major order. With `k = 2` these are the children of a
    /// parent cell one level up.
    pub fn child_block(&self, parent: CellCoord, k: u32) -> impl Iterator<Item = CellCoord> + '_ {
        let x0 = parent.x.saturating_mul(2);
        let y0 = parent.y.saturating_mul(2);
        let x1 = x0.saturating_add(k).min(self.width);
        let y1 = y0.saturating_add(k).min(self.height);
        let stride = self.stride;
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| CellCoord::new(stride, x, y)))
    }
}

fn validate_name(name: &str) -> Result<(), PyramidError> {
    if name.is_empty() || name.len() > NAME_LEN || !name.is_ascii() || name.contains('\0') {
        return Err(PyramidError::InvalidName(name.to_string()));
    }
    Ok(())
}

/// Per-image stack of levels, coarsest first, ending at stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    image_id: String,
    image_width: u32,
    image_height: u32,
    levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn new(
        image_id: impl Into<String>,
        image_width: u32,
        image_height: u32,
        levels: Vec<FeatureLevel>,
    ) -> Result<Self, PyramidError> {
        let pyramid = Self {
            image_id: image_id.into(),
            image_width,
            image_height,
            levels,
        };
        pyramid.validate()?;
        Ok(pyramid)
    }

    fn validate(&self) -> Result<(), PyramidError> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(PyramidError::Header(format!(
                "image size {}x{} is empty",
                self.image_width, self.image_height
            )));
        }
        if self.levels.is_empty() {
            return Err(PyramidError::NoLevels);
        }
        for (i, level) in self.levels.iter().enumerate() {
            level.validate()?;
            if i > 0 {
                let prev = self.levels[i - 1].stride;
                if level.stride * 2 != prev {
                    return Err(PyramidError::StrideChain {
                        level: level.name.clone(),
                        reason: format!("stride {} does not halve previous stride {prev}", level.stride),
                    });
                }
            }
            let expected_w = self.image_width.div_ceil(level.stride);
            let expected_h = self.image_height.div_ceil(level.stride);
            if level.width != expected_w || level.height != expected_h {
                return Err(level.shape_error(format!(
                    "grid {}x{} does not cover a {}x{} image at stride {} (expected {}x{})",
                    level.width,
                    level.height,
                    self.image_width,
                    self.image_height,
                    level.stride,
                    expected_w,
                    expected_h
                )));
            }
        }
        let finest = self.levels.last().expect("non-empty");
        if finest.stride != 1 {
            return Err(PyramidError::StrideChain {
                level: finest.name.clone(),
                reason: format!("finest level has stride {}, expected 1", finest.stride),
            });
        }
        Ok(())
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn set_image_id(&mut self, id: impl Into<String>) {
        self.image_id = id.into();
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn level_by_stride(&self, stride: u32) -> Result<&FeatureLevel, PyramidError> {
        self.levels
            .iter()
            .find(|l| l.stride == stride)
            .ok_or(PyramidError::NoSuchStride(stride))
    }

    pub fn level_by_name(&self, name: &str) -> Result<&FeatureLevel, PyramidError> {
        self.levels
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| PyramidError::NoSuchLevel(name.to_string()))
    }

    /// Continuous image position of a cell center, `(x + 0.5) * s - 0.5`.
    ///
    /// Border cells of odd-sized grids may only partially overlap the image;
    /// their position is clamped to the last pixel so it stays inside the
    /// image.
    pub fn cell_to_image(&self, cell: CellCoord) -> Result<ImageCoord, PyramidError> {
        let level = self.level_by_stride(cell.stride)?;
        level.check_cell(cell)?;
        let s = cell.stride as f64;
        let u = ((cell.x as f64 + 0.5) * s - 0.5).min((self.image_width - 1) as f64);
        let v = ((cell.y as f64 + 0.5) * s - 0.5).min((self.image_height - 1) as f64);
        Ok(ImageCoord::new(u, v))
    }
}

/// Serializes a pyramid in the `.dpyr` layout and returns the byte count.
pub fn write_pyramid<W: Write>(pyramid: &FeaturePyramid, mut sink: W) -> Result<u64, PyramidError> {
    pyramid.validate()?;
    let mut written = 0u64;
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(&MAGIC);
    for v in [
        FORMAT_VERSION,
        pyramid.image_width,
        pyramid.image_height,
        pyramid.levels.len() as u32,
        0,
    ] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&header)?;
    written += header.len() as u64;

    for level in &pyramid.levels {
        let mut record = [0u8; LEVEL_RECORD_LEN];
        record[..level.name.len()].copy_from_slice(level.name.as_bytes());
        for (i, v) in [level.stride, level.width, level.height, level.channels]
            .into_iter()
            .enumerate()
        {
            let off = NAME_LEN + 4 * i;
            record[off..off + 4].copy_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&record)?;
        written += record.len() as u64;

        let mut bytes = Vec::with_capacity(level.data.len() * 4);
        for v in &level.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&bytes)?;
        written += bytes.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

/// Parses and validates a `.dpyr` stream.
pub fn read_pyramid<R: Read>(mut source: R, image_id: impl Into<String>) -> Result<FeaturePyramid, PyramidError> {
    let mut header = [0u8; HEADER_LEN];
    read_exact(&mut source, &mut header)?;
    let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(PyramidError::BadMagic(magic));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let version = word(1);
    if version != FORMAT_VERSION {
        return Err(PyramidError::UnsupportedVersion(version));
    }
    let (image_width, image_height, level_count, reserved) = (word(2), word(3), word(4), word(5));
    if reserved != 0 {
        return Err(PyramidError::Header(format!("reserved field is {reserved}, expected 0")));
    }
    if level_count == 0 {
        return Err(PyramidError::NoLevels);
    }
    if level_count as usize > ALLOWED_STRIDES.len() {
        return Err(PyramidError::Header(format!(
            "{level_count} levels exceeds the maximum of {}",
            ALLOWED_STRIDES.len()
        )));
    }

    let mut levels = Vec::with_capacity(level_count as usize);
    for _ in 0..level_count {
        let mut record = [0u8; LEVEL_RECORD_LEN];
        read_exact(&mut source, &mut record)?;
        let name_bytes = &record[..NAME_LEN];
        let name_end = name_bytes.iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
        if name_bytes[name_end..].iter().any(|&b| b != 0) {
            return Err(PyramidError::InvalidName(String::from_utf8_lossy(name_bytes).into_owned()));
        }
        let name = std::str::from_utf8(&name_bytes[..name_end])
            .map_err(|_| PyramidError::InvalidName(String::from_utf8_lossy(name_bytes).into_owned()))?
            .to_string();
        validate_name(&name)?;
        let field = |i: usize| {
            let off = NAME_LEN + 4 * i;
            u32::from_le_bytes(record[off..off + 4].try_into().expect("4 bytes"))
        };
        let (stride, width, height, channels) = (field(0), field(1), field(2), field(3));
        if !ALLOWED_STRIDES.contains(&stride) {
            return Err(PyramidError::InvalidStride { level: name, stride });
        }
        // Reject shapes before sizing the payload so a corrupt header cannot
        // trigger a huge read.
        if width != image_width.div_ceil(stride) || height != image_height.div_ceil(stride) {
            return Err(PyramidError::Shape {
                level: name,
                reason: format!(
                    "grid {width}x{height} does not cover a {image_width}x{image_height} image at stride {stride}"
                ),
            });
        }
        let count = width as u64 * height as u64 * channels as u64;
        let mut bytes = Vec::new();
        let got = (&mut source).take(count * 4).read_to_end(&mut bytes)?;
        if got as u64 != count * 4 {
            return Err(PyramidError::Truncated);
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        levels.push(FeatureLevel::new(name, stride, width, height, channels, data)?);
    }
    FeaturePyramid::new(image_id, image_width, image_height, levels)
}

fn read_exact<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<(), PyramidError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => PyramidError::Truncated,
        _ => PyramidError::Io(e),
    })
}

/// Image id for a pyramid file: the file name minus its `.dpyr` extension.
pub fn image_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    match name.strip_suffix(".dpyr") {
        Some(stem) => stem.to_string(),
        None => name,
    }
}

pub fn load_pyramid(path: &Path) -> Result<FeaturePyramid, PyramidError> {
    let file = File::open(path)?;
    read_pyramid(BufReader::new(file), image_id_from_path(path))
}

pub fn save_pyramid(pyramid: &FeaturePyramid, path: &Path) -> Result<u64, PyramidError> {
    let file = File::create(path)?;
    write_pyramid(pyramid, BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_cell() -> FeaturePyramid {
        let level = FeatureLevel::new("conv1_2", 1, 1, 1, 1, vec![0.0]).unwrap();
        FeaturePyramid::new("a", 1, 1, vec![level]).unwrap()
    }

    fn ramp_level(stride: u32, w: u32, h: u32, c: u32) -> FeatureLevel {
        let data = (0..w * h * c).map(|i| i as f32).collect();
        FeatureLevel::new("ramp", stride, w, h, c, data).unwrap()
    }

    fn two_level(image_w: u32, image_h: u32) -> FeaturePyramid {
        let coarse_w = image_w.div_ceil(2);
        let coarse_h = image_h.div_ceil(2);
        let coarse = FeatureLevel::new("coarse", 2, coarse_w, coarse_h, 1, vec![1.0; (coarse_w * coarse_h) as usize]).unwrap();
        let fine = FeatureLevel::new("fine", 1, image_w, image_h, 1, vec![1.0; (image_w * image_h) as usize]).unwrap();
        FeaturePyramid::new("p", image_w, image_h, vec![coarse, fine]).unwrap()
    }

    #[test]
    fn single_cell_file_size_follows_layout() {
        let mut buf = Vec::new();
        let n = write_pyramid(&single_cell(), &mut buf).unwrap();
        assert_eq!(n as usize, HEADER_LEN + LEVEL_RECORD_LEN + 4);
        assert_eq!(buf.len(), 60);
        assert_eq!(&buf[..4], b"DPYR");
        assert_eq!(&buf[24..31], b"conv1_2");
        assert!(buf[31..40].iter().all(|&b| b == 0));
        assert_eq!(u32::from_le_bytes(buf[40..44].try_into().unwrap()), 1);
    }

    #[test]
    fn stride_three_rejected() {
        let err = FeatureLevel::new("odd", 3, 1, 1, 1, vec![0.0]).unwrap_err();
        assert!(matches!(err, PyramidError::InvalidStride { stride: 3, .. }));
    }

    #[test]
    fn nan_rejected_with_level_name() {
        let err = FeatureLevel::new("bad", 1, 2, 1, 1, vec![0.0, f32::NAN]).unwrap_err();
        match err {
            PyramidError::NonFinite { level, index } => {
                assert_eq!(level, "bad");
                assert_eq!(index, 1);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn corrupted_magic() {
        let mut buf = Vec::new();
        write_pyramid(&single_cell(), &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_pyramid(&buf[..], "a"), Err(PyramidError::BadMagic(_))));
    }

    #[test]
    fn truncated_payload() {
        let mut buf = Vec::new();
        write_pyramid(&two_level(5, 3), &mut buf).unwrap();
        for cut in [3, HEADER_LEN + 5, buf.len() - 1] {
            assert!(
                matches!(read_pyramid(&buf[..cut], "p"), Err(PyramidError::Truncated)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn nan_payload_rejected_on_load() {
        let mut buf = Vec::new();
        write_pyramid(&single_cell(), &mut buf).unwrap();
        let n = buf.len();
        buf[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_pyramid(&buf[..], "a"), Err(PyramidError::NonFinite { .. })));
    }

    #[test]
    fn non_halving_chain_rejected() {
        let coarse = FeatureLevel::new("c", 4, 1, 1, 1, vec![0.0]).unwrap();
        let fine = FeatureLevel::new("f", 1, 4, 4, 1, vec![0.0; 16]).unwrap();
        let err = FeaturePyramid::new("p", 4, 4, vec![coarse, fine]).unwrap_err();
        assert!(matches!(err, PyramidError::StrideChain { .. }));
    }

    #[test]
    fn non_halving_chain_rejected_on_load() {
        // Hand-assemble a file whose strides go 4 -> 1.
        let mut buf = Vec::new();
        buf.extend_from_slice(b"DPYR");
        for v in [1u32, 4, 4, 2, 0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (stride, w) in [(4u32, 1u32), (1, 4)] {
            let mut name = [0u8; 16];
            name[0] = b'l';
            buf.extend_from_slice(&name);
            for v in [stride, w, w, 1] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for _ in 0..w * w {
                buf.extend_from_slice(&0f32.to_le_bytes());
            }
        }
        assert!(matches!(read_pyramid(&buf[..], "p"), Err(PyramidError::StrideChain { .. })));
    }

    #[test]
    fn stride_eight_level_of_1600x1200_accepted() {
        // 1600x1200 image at stride 8 is a 200x150 grid.
        let level = FeatureLevel::new("conv3_pool", 8, 200, 150, 1, vec![0.0; 200 * 150]).unwrap();
        let err = FeaturePyramid::new("p", 1600, 1200, vec![level.clone()]).unwrap_err();
        // Only the missing stride-1 level is a problem, not the grid shape.
        assert!(matches!(err, PyramidError::StrideChain { .. }));
        let wrong = FeatureLevel::new("conv3_pool", 8, 201, 150, 1, vec![0.0; 201 * 150]).unwrap();
        let err = FeaturePyramid::new("p", 1600, 1200, vec![wrong]).unwrap_err();
        assert!(matches!(err, PyramidError::Shape { .. }));
    }

    #[test]
    fn cell_to_image_convention() {
        let p = two_level(1600, 1200);
        assert_eq!(p.cell_to_image(CellCoord::new(1, 10, 20)).unwrap(), ImageCoord::new(10.0, 20.0));
        assert_eq!(p.cell_to_image(CellCoord::new(2, 0, 0)).unwrap(), ImageCoord::new(0.5, 0.5));
        assert!(matches!(
            p.cell_to_image(CellCoord::new(2, 800, 0)),
            Err(PyramidError::OutOfBounds { .. })
        ));
        assert!(matches!(p.cell_to_image(CellCoord::new(8, 0, 0)), Err(PyramidError::NoSuchStride(8))));
    }

    #[test]
    fn cell_to_image_stride_eight() {
        let w = 1600u32;
        let h = 1200u32;
        let levels = [8u32, 4, 2, 1]
            .iter()
            .map(|&s| {
                let (lw, lh) = (w.div_ceil(s), h.div_ceil(s));
                FeatureLevel::new(format!("s{s}"), s, lw, lh, 1, vec![0.0; (lw * lh) as usize]).unwrap()
            })
            .collect();
        let p = FeaturePyramid::new("p", w, h, levels).unwrap();
        assert_eq!(p.cell_to_image(CellCoord::new(8, 0, 0)).unwrap(), ImageCoord::new(3.5, 3.5));
        assert_eq!(
            p.cell_to_image(CellCoord::new(8, 199, 149)).unwrap(),
            ImageCoord::new(1595.5, 1195.5)
        );
    }

    #[test]
    fn partial_border_cell_stays_in_image() {
        // 5 pixels wide at stride 4: the second cell covers only pixel 4.
        let coarse = FeatureLevel::new("c", 4, 2, 1, 1, vec![0.0; 2]).unwrap();
        let mid = FeatureLevel::new("m", 2, 3, 1, 1, vec![0.0; 3]).unwrap();
        let fine = FeatureLevel::new("f", 1, 5, 1, 1, vec![0.0; 5]).unwrap();
        let p = FeaturePyramid::new("p", 5, 1, vec![coarse, mid, fine]).unwrap();
        assert_eq!(p.cell_to_image(CellCoord::new(4, 1, 0)).unwrap().u, 4.0);
        assert_eq!(p.cell_to_image(CellCoord::new(4, 0, 0)).unwrap().u, 1.5);
    }

    #[test]
    fn descriptor_lookup() {
        let one = FeatureLevel::new("one", 1, 1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(one.descriptor_at(CellCoord::new(1, 0, 0)).unwrap(), &[1.0, 2.0, 3.0]);

        let (w, c) = (5u32, 3u32);
        let ramp = ramp_level(1, w, 4, c);
        let (x, y) = (2u32, 1u32);
        let start = ((y * w + x) * c) as f32;
        assert_eq!(
            ramp.descriptor_at(CellCoord::new(1, x, y)).unwrap(),
            &[start, start + 1.0, start + 2.0]
        );
        assert!(matches!(
            ramp.descriptor_at(CellCoord::new(1, w, 0)),
            Err(PyramidError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn child_block_clips_at_border() {
        let fine = ramp_level(1, 5, 3, 1);
        let kids: Vec<_> = fine.child_block(CellCoord::new(2, 0, 0), 2).collect();
        assert_eq!(
            kids,
            vec![CellCoord::new(1, 0, 0), CellCoord::new(1, 1, 0), CellCoord::new(1, 0, 1), CellCoord::new(1, 1, 1)]
        );
        let kids: Vec<_> = fine.child_block(CellCoord::new(2, 2, 1), 2).collect();
        assert_eq!(kids, vec![CellCoord::new(1, 4, 2)]);
    }

    #[test]
    fn image_id_strips_extension() {
        assert_eq!(image_id_from_path(Path::new("/x/img_01.jpg.dpyr")), "img_01.jpg");
        assert_eq!(image_id_from_path(Path::new("plain")), "plain");
    }
}
