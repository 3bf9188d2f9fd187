//! Binary checkpoint, little-endian:
//!
//! ```text
//! magic "BHCK" | u32 version
//! str kind | str config        (u32 byte length + UTF-8)
//! u64 step
//! u32 count, then per tensor: str name | u32 rows | u32 cols | f64 data
//! u32 extra count, same tensor layout
//! u8 has_adam; if 1: u64 t, then m and v for every parameter in store order
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{NnError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BHCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model family tag, e.g. `"jointvae"`.
    pub kind: String,
    /// Opaque config echo (JSON text).
    pub config: String,
    pub step: u64,
    pub params: ParamStore,
    /// Non-trainable tensors such as normalization statistics.
    pub extras: BTreeMap<String, Tensor>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(VERSION)?;
        write_str(w, &self.kind)?;
        write_str(w, &self.config)?;
        w.write_u64::<LE>(self.step)?;
        w.write_u32::<LE>(self.params.len() as u32)?;
        for (name, t) in self.params.entries() {
            write_tensor(w, name, t)?;
        }
        w.write_u32::<LE>(self.extras.len() as u32)?;
        for (name, t) in &self.extras {
            write_tensor(w, name, t)?;
        }
        match &self.adam {
            None => w.write_u8(0)?,
            Some(a) => {
                w.write_u8(1)?;
                let c = a.config;
                for x in [c.lr, c.beta1, c.beta2, c.eps, c.clip_norm.unwrap_or(-1.0)] {
                    w.write_f64::<LE>(x)?;
                }
                w.write_u64::<LE>(a.t)?;
                for t in a.m.iter().chain(&a.v) {
                    write_tensor(w, "", t)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Parse("bad magic".into()));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(NnError::Parse(format!("unsupported version {version}")));
        }
        let kind = read_str(r)?;
        let config = read_str(r)?;
        let step = r.read_u64::<LE>()?;
        let mut params = ParamStore::new();
        for _ in 0..r.read_u32::<LE>()? {
            let (name, t) = read_tensor(r)?;
            if params.id(&name).is_some() {
                return Err(NnError::Parse(format!("duplicate parameter {name}")));
            }
            params.add(name, t);
        }
        let mut extras = BTreeMap::new();
        for _ in 0..r.read_u32::<LE>()? {
            let (name, t) = read_tensor(r)?;
            extras.insert(name, t);
        }
        let adam = match r.read_u8()? {
            0 => None,
            1 => {
                let mut c = [0.0; 5];
                for x in &mut c {
                    *x = r.read_f64::<LE>()?;
                }
                let config = AdamConfig {
                    lr: c[0],
                    beta1: c[1],
                    beta2: c[2],
                    eps: c[3],
                    clip_norm: (c[4] >= 0.0).then_some(c[4]),
                };
                let t = r.read_u64::<LE>()?;
                let mut moments = Vec::with_capacity(2 * params.len());
                for _ in 0..2 * params.len() {
                    moments.push(read_tensor(r)?.1);
                }
                let v = moments.split_off(params.len());
                for (id, (m, v)) in params.ids().zip(moments.iter().zip(&v)) {
                    let s = params.get(id).shape();
                    if m.shape() != s || v.shape() != s {
                        return Err(NnError::Parse("optimizer state shape".into()));
                    }
                }
                Some(Adam { config, t, m: moments, v })
            }
            x => return Err(NnError::Parse(format!("bad optimizer flag {x}"))),
        };
        Ok(Checkpoint {
            kind,
            config,
            step,
            params,
            extras,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let ck = Self::read_from(&mut r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(NnError::Parse("trailing bytes".into()));
        }
        Ok(ck)
    }

    pub fn extra(&self, name: &str) -> Result<&Tensor> {
        self.extras
            .get(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    if n > 1 << 24 {
        return Err(NnError::Parse("string too long".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| NnError::Parse(e.to_string()))
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_str(w, name)?;
    w.write_u32::<LE>(t.rows() as u32)?;
    w.write_u32::<LE>(t.cols() as u32)?;
    for x in t.data() {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name = read_str(r)?;
    let rows = r.read_u32::<LE>()? as usize;
    let cols = r.read_u32::<LE>()? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(NnError::Parse(format!("tensor {name} too large")));
    }
    let mut data = vec![0.0; rows * cols];
    r.read_f64_into::<LE>(&mut data)?;
    Ok((name, Tensor::new(rows, cols, data)))
}
