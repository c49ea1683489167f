//! Binary model checkpoints.
//!
//! Layout (little endian): magic `G2CK`, format version, model kind,
//! precision, activation, layer count and widths, parameter count, row-major
//! parameters as f64, four normalisation arrays (input mean, input variance,
//! output mean, output variance; each length-prefixed, possibly empty) and a
//! length-prefixed JSON metadata string.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, Real};

pub const MAGIC: &[u8; 4] = b"G2CK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    CyCorrection,
    Phi,
    Metric,
}

impl ModelKind {
    fn code(self) -> u32 {
        match self {
            ModelKind::CyCorrection => 0,
            ModelKind::Phi => 1,
            ModelKind::Metric => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        Ok(match c {
            0 => ModelKind::CyCorrection,
            1 => ModelKind::Phi,
            2 => ModelKind::Metric,
            _ => return Err(Error::Format(format!("unknown model kind {c}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Precision the model is evaluated in: 32 or 64.
    pub precision: u32,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
    pub norm: [Vec<f64>; 4],
    pub metadata: String,
}

impl Checkpoint {
    pub fn from_mlp<T: Real>(kind: ModelKind, net: &Mlp<T>) -> Self {
        Self {
            kind,
            precision: (std::mem::size_of::<T>() * 8) as u32,
            widths: net.widths().to_vec(),
            activation: net.activation(),
            params: net.params.iter().map(|p| p.f64()).collect(),
            norm: Default::default(),
            metadata: String::new(),
        }
    }

    pub fn to_mlp<T: Real>(&self) -> Result<Mlp<T>> {
        Mlp::from_params(&self.widths, self.activation, self.params.iter().map(|&p| T::of(p)).collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u32(w, self.kind.code())?;
        put_u32(w, self.precision)?;
        put_u32(w, self.activation.code())?;
        put_u64(w, self.widths.len() as u64)?;
        for &n in &self.widths {
            put_u64(w, n as u64)?;
        }
        put_f64s(w, &self.params)?;
        for arr in &self.norm {
            put_f64s(w, arr)?;
        }
        put_u64(w, self.metadata.len() as u64)?;
        w.write_all(self.metadata.as_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION}); retrain the model"
            )));
        }
        let kind = ModelKind::from_code(get_u32(r)?)?;
        let precision = get_u32(r)?;
        let activation = Activation::from_code(get_u32(r)?)?;
        let layers = get_u64(r)? as usize;
        if layers > 64 {
            return Err(Error::Format(format!("implausible layer count {layers}")));
        }
        let widths = (0..layers).map(|_| get_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let params = get_f64s(r)?;
        let norm = [get_f64s(r)?, get_f64s(r)?, get_f64s(r)?, get_f64s(r)?];
        let len = get_u64(r)? as usize;
        let mut meta = vec![0u8; len];
        r.read_exact(&mut meta)?;
        let metadata = String::from_utf8(meta).map_err(|e| Error::Format(e.to_string()))?;
        let ck = Self {
            kind,
            precision,
            widths,
            activation,
            params,
            norm,
            metadata,
        };
        ck.to_mlp::<f64>()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub(crate) fn put_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    put_u64(w, v.len() as u64)?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn get_f64s(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = get_u64(r)? as usize;
    if n > 1 << 32 {
        return Err(Error::Format(format!("implausible array length {n}")));
    }
    (0..n).map(|_| get_f64(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_is_exact() {
        let net: Mlp<f32> =
            Mlp::glorot(&[4, 6, 2], Activation::Gelu, false, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut ck = Checkpoint::from_mlp(ModelKind::Phi, &net);
        ck.norm = [vec![1.0, 2.0], vec![3.0], vec![], vec![0.5]];
        ck.metadata = "{\"a\":1}".into();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_mlp::<f32>().unwrap(), net);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let net: Mlp<f64> = Mlp::zeros(&[1, 1], Activation::Tanh).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_mlp(ModelKind::Metric, &net).write_to(&mut buf).unwrap();
        buf[4] = 99;
        let err = Checkpoint::read_from(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
        assert!(Checkpoint::read_from(&mut &b"XXXX"[..]).is_err());
    }
}
