//! Binary dataset and sequence files. All integers and floats little-endian.
//!
//! Dataset file:
//!
//! ```text
//! magic "BHDS" | u32 version | u8 family mask | u64 seed
//! u32 frame_dim (208) | u32 hand_points | u32 text_dim | u32 object_dim | u32 count
//! count x record:
//!   u8 family | u8 hand type | str instruction | object | u32 N
//!   N x 208 f64 frames | N x (left V f64, right V f64) distance fields
//! object: str name | 3 f64 axis | 3 f64 pivot | 2 f64 limits
//!         u32 n_base | n_base x 3 f64 | u32 n_moving | n_moving x 3 f64
//! str: u32 byte length | utf-8 bytes
//! ```
//!
//! Sequence file (sampler output):
//!
//! ```text
//! magic "BHSQ" | u32 version | u64 seed | u64 text hash | u64 object hash
//! u8 hand type | str instruction | object | u32 N | N x 208 f64 frames
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use super::synth::{generate_sample, sample_seed, Family, Sample};
use crate::error::{CoreError, Result};
use crate::geometry::{ArticulatedObjectModel, DistanceField, DEFAULT_HAND_POINTS};
use crate::types::{HandType, MotionSequence, FRAME_DIM, MAX_FRAMES};

const DATASET_MAGIC: &[u8; 4] = b"BHDS";
const SEQUENCE_MAGIC: &[u8; 4] = b"BHSQ";
pub const DATASET_VERSION: u32 = 1;
pub const SEQUENCE_VERSION: u32 = 1;
const MAX_STRING: u32 = 1 << 20;
const MAX_POINTS: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub families: Vec<Family>,
    pub seed: u64,
    pub hand_points: usize,
    pub text_dim: usize,
    pub object_dim: usize,
    pub samples: Vec<Sample>,
}

/// `count` samples cycling through `families`, all with `frames` frames.
pub fn generate_dataset(
    families: &[Family],
    count: usize,
    frames: usize,
    seed: u64,
    text_dim: usize,
    object_dim: usize,
) -> Result<Dataset> {
    if count == 0 {
        return Err(CoreError::InvalidInput("dataset count must be at least 1".into()));
    }
    if families.is_empty() {
        return Err(CoreError::InvalidInput("no task families selected".into()));
    }
    let mut fams = families.to_vec();
    fams.sort();
    fams.dedup();
    let samples = (0..count)
        .map(|i| generate_sample(fams[i % fams.len()], frames, sample_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        families: fams,
        seed,
        hand_points: DEFAULT_HAND_POINTS,
        text_dim,
        object_dim,
        samples,
    })
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u32::<LE>()?;
    if n > MAX_STRING {
        return Err(CoreError::Parse(format!("string length {n} too large")));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CoreError::Parse(e.to_string()))
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for &x in v {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

fn write_points(w: &mut impl Write, pts: &[Vector3<f64>]) -> Result<()> {
    w.write_u32::<LE>(pts.len() as u32)?;
    for p in pts {
        write_f64s(w, p.as_slice())?;
    }
    Ok(())
}

fn read_points(r: &mut impl Read) -> Result<Vec<Vector3<f64>>> {
    let n = r.read_u32::<LE>()?;
    if n > MAX_POINTS {
        return Err(CoreError::Parse(format!("point count {n} too large")));
    }
    let flat = read_f64s(r, n as usize * 3)?;
    Ok(flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
}

pub fn write_object(w: &mut impl Write, m: &ArticulatedObjectModel) -> Result<()> {
    write_str(w, &m.name)?;
    write_f64s(w, m.axis().as_slice())?;
    write_f64s(w, m.pivot().as_slice())?;
    let (lo, hi) = m.limits();
    write_f64s(w, &[lo, hi])?;
    write_points(w, m.part(0))?;
    write_points(w, m.part(1))
}

pub fn read_object(r: &mut impl Read) -> Result<ArticulatedObjectModel> {
    let name = read_str(r)?;
    let v = read_f64s(r, 8)?;
    let base = read_points(r)?;
    let moving = read_points(r)?;
    ArticulatedObjectModel::new(
        name,
        base,
        moving,
        Vector3::new(v[0], v[1], v[2]),
        Vector3::new(v[3], v[4], v[5]),
        (v[6], v[7]),
    )
}

fn read_frames(r: &mut impl Read) -> Result<MotionSequence> {
    let n = r.read_u32::<LE>()? as usize;
    if n == 0 || n > MAX_FRAMES {
        return Err(CoreError::Parse(format!("frame count {n} outside 1..={MAX_FRAMES}")));
    }
    MotionSequence::unflatten(&read_f64s(r, n * FRAME_DIM)?)
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(CoreError::Parse(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LE>(DATASET_VERSION)?;
        w.write_u8(Family::mask(&self.families))?;
        w.write_u64::<LE>(self.seed)?;
        for d in [FRAME_DIM, self.hand_points, self.text_dim, self.object_dim, self.samples.len()] {
            w.write_u32::<LE>(d as u32)?;
        }
        for s in &self.samples {
            if s.fields.len() != s.sequence.len() {
                return Err(CoreError::ShapeMismatch("one distance field per frame".into()));
            }
            s.sequence.validate(s.object.limits())?;
            w.write_u8(s.family.index() as u8)?;
            w.write_u8(s.hand_type.index() as u8)?;
            write_str(w, &s.instruction)?;
            write_object(w, &s.object)?;
            w.write_u32::<LE>(s.sequence.len() as u32)?;
            write_f64s(w, &s.sequence.flatten())?;
            for f in &s.fields {
                if f.left.len() != self.hand_points || f.right.len() != self.hand_points {
                    return Err(CoreError::ShapeMismatch(format!(
                        "distance field must have {} entries per hand",
                        self.hand_points
                    )));
                }
                write_f64s(w, &f.left)?;
                write_f64s(w, &f.right)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        check_magic(r, DATASET_MAGIC)?;
        let version = r.read_u32::<LE>()?;
        if version != DATASET_VERSION {
            return Err(CoreError::Parse(format!("unsupported dataset version {version}")));
        }
        let families = Family::from_mask(r.read_u8()?);
        let seed = r.read_u64::<LE>()?;
        let frame_dim = r.read_u32::<LE>()? as usize;
        if frame_dim != FRAME_DIM {
            return Err(CoreError::Parse(format!("frame dim {frame_dim}, expected {FRAME_DIM}")));
        }
        let hand_points = r.read_u32::<LE>()? as usize;
        let text_dim = r.read_u32::<LE>()? as usize;
        let object_dim = r.read_u32::<LE>()? as usize;
        let count = r.read_u32::<LE>()? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let family = Family::from_index(r.read_u8()? as usize)?;
            let hand_type = HandType::from_index(r.read_u8()? as usize)?;
            let instruction = read_str(r)?;
            let object = read_object(r)?;
            let sequence = read_frames(r)?;
            let fields = (0..sequence.len())
                .map(|_| {
                    Ok(DistanceField {
                        left: read_f64s(r, hand_points)?,
                        right: read_f64s(r, hand_points)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                family,
                hand_type,
                instruction,
                object,
                sequence,
                fields,
            });
        }
        Ok(Dataset {
            families,
            seed,
            hand_points,
            text_dim,
            object_dim,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Generated sequence plus the conditions and seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFile {
    pub seed: u64,
    pub hand_type: HandType,
    pub instruction: String,
    pub object: ArticulatedObjectModel,
    pub sequence: MotionSequence,
}

pub fn condition_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl SequenceFile {
    pub fn text_hash(&self) -> u64 {
        condition_hash(self.instruction.as_bytes())
    }

    pub fn object_hash(&self) -> u64 {
        let mut buf = Vec::new();
        write_object(&mut buf, &self.object).expect("in-memory write");
        condition_hash(&buf)
    }

    /// Conditions that define a group for within-condition diversity.
    pub fn condition_key(&self) -> (u64, u64, usize) {
        (self.text_hash(), self.object_hash(), self.hand_type.index())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(SEQUENCE_MAGIC)?;
        w.write_u32::<LE>(SEQUENCE_VERSION)?;
        w.write_u64::<LE>(self.seed)?;
        w.write_u64::<LE>(self.text_hash())?;
        w.write_u64::<LE>(self.object_hash())?;
        w.write_u8(self.hand_type.index() as u8)?;
        write_str(w, &self.instruction)?;
        write_object(w, &self.object)?;
        w.write_u32::<LE>(self.sequence.len() as u32)?;
        write_f64s(w, &self.sequence.flatten())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        check_magic(r, SEQUENCE_MAGIC)?;
        let version = r.read_u32::<LE>()?;
        if version != SEQUENCE_VERSION {
            return Err(CoreError::Parse(format!("unsupported sequence version {version}")));
        }
        let seed = r.read_u64::<LE>()?;
        let text_hash = r.read_u64::<LE>()?;
        let object_hash = r.read_u64::<LE>()?;
        let hand_type = HandType::from_index(r.read_u8()? as usize)?;
        let instruction = read_str(r)?;
        let object = read_object(r)?;
        let sequence = read_frames(r)?;
        let file = SequenceFile {
            seed,
            hand_type,
            instruction,
            object,
            sequence,
        };
        if file.text_hash() != text_hash || file.object_hash() != object_hash {
            return Err(CoreError::Parse("condition hashes do not match contents".into()));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let ds = generate_dataset(&Family::ALL, 4, 12, 5, 64, 64).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn same_seed_same_bytes() {
        let bytes = |seed| {
            let mut buf = Vec::new();
            generate_dataset(&[Family::BiArt], 2, 10, seed, 64, 64)
                .unwrap()
                .write_to(&mut buf)
                .unwrap();
            buf
        };
        assert_eq!(bytes(7), bytes(7));
        assert_ne!(bytes(7), bytes(8));
    }

    #[test]
    fn truncated_file_is_error() {
        let ds = generate_dataset(&[Family::SingleArt], 1, 5, 1, 64, 64).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 9);
        assert!(Dataset::read_from(&mut buf.as_slice()).is_err());
        assert!(matches!(
            Dataset::read_from(&mut &b"NOPE...."[..]),
            Err(CoreError::Parse(_))
        ));
    }

    #[test]
    fn sequence_file_round_trip_and_hash_check() {
        let s = generate_sample(Family::BiArt, 8, 2).unwrap();
        let file = SequenceFile {
            seed: 42,
            hand_type: s.hand_type,
            instruction: s.instruction.clone(),
            object: s.object.clone(),
            sequence: s.sequence.clone(),
        };
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        assert_eq!(SequenceFile::read_from(&mut buf.as_slice()).unwrap(), file);
        // corrupt the stored text hash
        buf[16] ^= 0xff;
        assert!(SequenceFile::read_from(&mut buf.as_slice()).is_err());
    }
}
