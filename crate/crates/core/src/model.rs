//! The three-net cascade bundle and its on-disk container.
//!
//! The format is a plain little-endian dump: header, then per net the
//! parameter tensors with their names and shapes, raw bits. Loading the
//! same element type back reproduces every parameter bit for bit, which
//! keeps detection output reproducible across a save/load cycle.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{NetId, NetworkSpec, Parameters};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"CASCDET1";

/// All three stages of the detector plus whether the later nets expect
/// bridged features from the stage before them.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel<T: Scalar> {
    pub bridged: bool,
    pub net12: Parameters<T>,
    pub net24: Parameters<T>,
    pub net48: Parameters<T>,
}

impl<T: Scalar> CascadeModel<T> {
    /// Freshly initialized cascade; each net gets its own derived seed.
    pub fn init(seed: u64, bridged: bool) -> Result<Self> {
        Ok(CascadeModel {
            bridged,
            net12: Parameters::init(&NetworkSpec::net12(), seed)?,
            net24: Parameters::init(&NetworkSpec::net24(bridged), seed.wrapping_add(1))?,
            net48: Parameters::init(&NetworkSpec::net48(bridged), seed.wrapping_add(2))?,
        })
    }

    pub fn spec(&self, id: NetId) -> NetworkSpec {
        match id {
            NetId::Net12 => NetworkSpec::net12(),
            NetId::Net24 => NetworkSpec::net24(self.bridged),
            NetId::Net48 => NetworkSpec::net48(self.bridged),
        }
    }

    pub fn params(&self, id: NetId) -> &Parameters<T> {
        match id {
            NetId::Net12 => &self.net12,
            NetId::Net24 => &self.net24,
            NetId::Net48 => &self.net48,
        }
    }

    pub fn params_mut(&mut self, id: NetId) -> &mut Parameters<T> {
        match id {
            NetId::Net12 => &mut self.net12,
            NetId::Net24 => &mut self.net24,
            NetId::Net48 => &mut self.net48,
        }
    }

    pub fn numel(&self) -> usize {
        self.net12.numel() + self.net24.numel() + self.net48.numel()
    }

    pub fn cast<U: Scalar>(&self) -> CascadeModel<U> {
        CascadeModel {
            bridged: self.bridged,
            net12: self.net12.cast(),
            net24: self.net24.cast(),
            net48: self.net48.cast(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&[std::mem::size_of::<T>() as u8, self.bridged as u8, 3])?;
        for id in [NetId::Net12, NetId::Net24, NetId::Net48] {
            write_params(&mut w, id, self.params(id))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a model saved with the same element type; a width mismatch
    /// is an error rather than a silent precision change.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{} is not a cascade model file",
                path.display()
            )));
        }
        let mut head = [0u8; 3];
        r.read_exact(&mut head)?;
        let [dtype, bridged, nets] = head;
        if dtype as usize != std::mem::size_of::<T>() {
            return Err(Error::Format(format!(
                "model stores {}-byte floats but {}-byte floats were requested",
                dtype,
                std::mem::size_of::<T>()
            )));
        }
        if nets != 3 {
            return Err(Error::Format(format!("expected 3 nets, file has {nets}")));
        }
        let mut model = CascadeModel {
            bridged: bridged != 0,
            net12: Parameters::empty(),
            net24: Parameters::empty(),
            net48: Parameters::empty(),
        };
        for _ in 0..3 {
            let (id, params) = read_params(&mut r)?;
            *model.params_mut(id) = params;
        }
        Ok(model)
    }
}

fn write_params<T: Scalar, W: Write>(w: &mut W, id: NetId, params: &Parameters<T>) -> Result<()> {
    let id_bytes = id.as_str().as_bytes();
    w.write_all(&[id_bytes.len() as u8])?;
    w.write_all(id_bytes)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {name}")));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        if std::mem::size_of::<T>() == 4 {
            for v in tensor.data() {
                w.write_all(&v.to_f32_lossy().to_le_bytes())?;
            }
        } else {
            for v in tensor.data() {
                w.write_all(&v.to_f64_lossy().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_params<T: Scalar, R: Read>(r: &mut R) -> Result<(NetId, Parameters<T>)> {
    let id_len = read_u8(r)? as usize;
    let mut id_bytes = vec![0u8; id_len];
    r.read_exact(&mut id_bytes)?;
    let id = NetId::parse(
        std::str::from_utf8(&id_bytes)
            .map_err(|_| Error::Format("net id is not utf-8".into()))?,
    )?;
    let count = read_u32(r)?;
    let mut params = Parameters::empty();
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        let ndim = read_u8(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        if std::mem::size_of::<T>() == 4 {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(T::from_f32_exact(f32::from_le_bytes(buf)));
            }
        } else {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(T::from_f64_lossy(f64::from_le_bytes(buf)));
            }
        }
        params.insert(&name, Tensor::from_vec(&shape, data)?);
    }
    Ok((id, params))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
