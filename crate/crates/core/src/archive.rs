//! Binary container for per-pair verification results.
//!
//! ```text
//! "DMAR" | version=1 | record_count | reserved=0            (u32 LE)
//! record:
//!   image_a: str | width u32 | height u32
//!   image_b: str | width u32 | height u32
//!   level: str | tentative_count u32
//!   correspondence_count u32 | per correspondence: ua va ub vb (f64 LE)
//!   model_count u32 | per model: H row-major (9 x f64 LE)
//!                              | inlier_count u32 | inlier indices (u32 LE)
//! str = byte length u32 | UTF-8 bytes
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::pyramid::ImageCoord;
use crate::verify::{HomographyModel, VerifiedPair};

pub const MAGIC: [u8; 4] = *b"DMAR";
pub const FORMAT_VERSION: u32 = 1;
const MAX_STRING: u32 = 4096;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic {0:?}, expected \"DMAR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated")]
    Truncated,
    #[error("invalid archive: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for ArchiveError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ArchiveError::Truncated
        } else {
            ArchiveError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInfo {
    pub name: String,
    pub width: u32,
    pub height: u32,
}

/// Everything the later stages need about one matched image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub image_a: ImageInfo,
    pub image_b: ImageInfo,
    /// Level the tentative matches were made on before relocalization.
    pub level: String,
    pub tentative_count: usize,
    pub verified: VerifiedPair,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchArchive {
    pub records: Vec<PairRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), ArchiveError> {
    if s.len() > MAX_STRING as usize {
        return Err(ArchiveError::Invalid(format!("string of {} bytes is too long", s.len())));
    }
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_count(out: &mut Vec<u8>, n: usize) -> Result<(), ArchiveError> {
    let v = u32::try_from(n).map_err(|_| ArchiveError::Invalid(format!("count {n} exceeds u32")))?;
    put_u32(out, v);
    Ok(())
}

impl MatchArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_count(&mut out, self.records.len())?;
        put_u32(&mut out, 0);
        for r in &self.records {
            for info in [&r.image_a, &r.image_b] {
                put_str(&mut out, &info.name)?;
                put_u32(&mut out, info.width);
                put_u32(&mut out, info.height);
            }
            put_str(&mut out, &r.level)?;
            put_count(&mut out, r.tentative_count)?;
            put_count(&mut out, r.verified.correspondences.len())?;
            for (a, b) in &r.verified.correspondences {
                for v in [a.u, a.v, b.u, b.v] {
                    put_f64(&mut out, v);
                }
            }
            put_count(&mut out, r.verified.models.len())?;
            for m in &r.verified.models {
                for row in 0..3 {
                    for col in 0..3 {
                        put_f64(&mut out, m.h[(row, col)]);
                    }
                }
                put_count(&mut out, m.inliers.len())?;
                for &i in &m.inliers {
                    put_count(&mut out, i)?;
                }
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<u64, ArchiveError> {
        let bytes = self.to_bytes()?;
        sink.write_all(&bytes)?;
        sink.flush()?;
        Ok(bytes.len() as u64)
    }

    pub fn read_from<R: Read>(source: R) -> Result<Self, ArchiveError> {
        let mut r = Reader { inner: source };
        let mut magic = [0u8; 4];
        r.inner.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(ArchiveError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let count = r.u32()?;
        if r.u32()? != 0 {
            return Err(ArchiveError::Invalid("reserved header field is not zero".into()));
        }
        let mut records = Vec::new();
        for _ in 0..count {
            let image_a = r.image()?;
            let image_b = r.image()?;
            let level = r.string()?;
            let tentative_count = r.u32()? as usize;
            let n_corr = r.u32()? as usize;
            let mut correspondences = Vec::new();
            for _ in 0..n_corr {
                let (ua, va, ub, vb) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                correspondences.push((ImageCoord::new(ua, va), ImageCoord::new(ub, vb)));
            }
            let n_models = r.u32()?;
            let mut models = Vec::new();
            let mut seen = BTreeSet::new();
            for _ in 0..n_models {
                let mut h = Matrix3::zeros();
                for row in 0..3 {
                    for col in 0..3 {
                        h[(row, col)] = r.f64()?;
                    }
                }
                let n_in = r.u32()?;
                let mut inliers = Vec::new();
                for _ in 0..n_in {
                    let i = r.u32()? as usize;
                    if i >= n_corr || !seen.insert(i) {
                        return Err(ArchiveError::Invalid(format!(
                            "pair {} / {}: bad or repeated inlier index {i}",
                            image_a.name, image_b.name
                        )));
                    }
                    inliers.push(i);
                }
                models.push(HomographyModel { h, inliers });
            }
            let total_inliers = models.iter().map(HomographyModel::score).sum();
            records.push(PairRecord {
                verified: VerifiedPair {
                    image_a: image_a.name.clone(),
                    image_b: image_b.name.clone(),
                    correspondences,
                    models,
                    total_inliers,
                },
                image_a,
                image_b,
                level,
                tentative_count,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<u64, ArchiveError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32, ArchiveError> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64, ArchiveError> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn string(&mut self) -> Result<String, ArchiveError> {
        let len = self.u32()?;
        if len > MAX_STRING {
            return Err(ArchiveError::Invalid(format!("string length {len}")));
        }
        let mut b = vec![0u8; len as usize];
        self.inner.read_exact(&mut b)?;
        String::from_utf8(b).map_err(|_| ArchiveError::Invalid("string is not UTF-8".into()))
    }

    fn image(&mut self) -> Result<ImageInfo, ArchiveError> {
        Ok(ImageInfo {
            name: self.string()?,
            width: self.u32()?,
            height: self.u32()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MatchArchive {
        let corr = vec![
            (ImageCoord::new(1.0, 2.0), ImageCoord::new(3.0, 4.0)),
            (ImageCoord::new(5.5, 6.0), ImageCoord::new(7.0, 8.25)),
            (ImageCoord::new(0.1, 0.2), ImageCoord::new(0.3, 0.4)),
        ];
        MatchArchive {
            records: vec![PairRecord {
                image_a: ImageInfo {
                    name: "a.jpg".into(),
                    width: 64,
                    height: 48,
                },
                image_b: ImageInfo {
                    name: "b.jpg".into(),
                    width: 64,
                    height: 48,
                },
                level: "conv3_pool".into(),
                tentative_count: 3,
                verified: VerifiedPair {
                    image_a: "a.jpg".into(),
                    image_b: "b.jpg".into(),
                    correspondences: corr,
                    models: vec![HomographyModel {
                        h: Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, 2.0, 0.0, 0.0, 1.0),
                        inliers: vec![0, 1],
                    }],
                    total_inliers: 2,
                },
            }],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        let back = MatchArchive::read_from(&bytes[..]).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            MatchArchive::read_from(&bytes[..bytes.len() - 3]),
            Err(ArchiveError::Truncated)
        ));
        // Last inlier index -> out of range.
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(MatchArchive::read_from(&bytes[..]), Err(ArchiveError::Invalid(_))));
        bytes[0] = b'x';
        assert!(matches!(MatchArchive::read_from(&bytes[..]), Err(ArchiveError::BadMagic(_))));
    }

    #[test]
    fn empty_archive() {
        let bytes = MatchArchive::default().to_bytes().unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(MatchArchive::read_from(&bytes[..]).unwrap(), MatchArchive::default());
    }
}
