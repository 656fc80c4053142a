//! Binary little-endian checkpoints.
//!
//! Layout: magic `INFC`, format version byte, kind byte (0 mlp, 1 bnn),
//! activation byte, four `u64` arch fields, then for an MLP one `u64` length
//! and that many `f64`s; for a BNN the `kl_weight` followed by the means and
//! log-variance arrays in the same form.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::bnn::BnnModel;
use crate::mlp::{Activation, ArchSpec, MlpModel};
use crate::training::Network;

const MAGIC: &[u8; 4] = b"INFC";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("unknown tag {what} = {value}")]
    Tag { what: &'static str, value: u8 },
    #[error("inconsistent checkpoint: {0}")]
    Invalid(String),
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    put_u64(w, xs.len() as u64)?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u8<R: Read>(r: &mut R) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_f64s<R: Read>(r: &mut R, limit: usize) -> Result<Vec<f64>, CheckpointError> {
    let n = get_u64(r)? as usize;
    if n > limit {
        return Err(CheckpointError::Invalid(format!("array length {n} exceeds {limit}")));
    }
    (0..n).map(|_| get_f64(r).map_err(Into::into)).collect()
}

pub fn write_network<W: Write>(net: &Network, mut w: W) -> io::Result<()> {
    let arch = net.arch();
    w.write_all(MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    let kind = match net {
        Network::Mlp(_) => 0u8,
        Network::Bnn(_) => 1u8,
    };
    let act = match arch.activation {
        Activation::Relu => 0u8,
        Activation::Selu => 1u8,
    };
    w.write_all(&[kind, act])?;
    for v in [arch.n_in, arch.hidden_layers, arch.hidden_width, arch.n_out] {
        put_u64(&mut w, v as u64)?;
    }
    match net {
        Network::Mlp(m) => put_f64s(&mut w, &m.params.values)?,
        Network::Bnn(b) => {
            w.write_all(&b.kl_weight.to_le_bytes())?;
            put_f64s(&mut w, &b.means.values)?;
            put_f64s(&mut w, &b.logvars)?;
        }
    }
    w.flush()
}

pub fn read_network<R: Read>(mut r: R) -> Result<Network, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = get_u8(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let kind = get_u8(&mut r)?;
    let activation = match get_u8(&mut r)? {
        0 => Activation::Relu,
        1 => Activation::Selu,
        value => return Err(CheckpointError::Tag { what: "activation", value }),
    };
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = get_u64(&mut r)? as usize;
    }
    let arch = ArchSpec::new(dims[0], dims[1], dims[2], dims[3]).with_activation(activation);
    arch.validate().map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let limit = arch.num_params();
    let invalid = |e: &dyn std::fmt::Display| CheckpointError::Invalid(e.to_string());
    match kind {
        0 => {
            let values = get_f64s(&mut r, limit)?;
            Ok(Network::Mlp(MlpModel::from_params(arch, values).map_err(|e| invalid(&e))?))
        }
        1 => {
            let kl_weight = get_f64(&mut r)?;
            let means = get_f64s(&mut r, limit)?;
            let logvars = get_f64s(&mut r, limit)?;
            Ok(Network::Bnn(BnnModel::from_parts(arch, means, logvars, kl_weight).map_err(|e| invalid(&e))?))
        }
        value => Err(CheckpointError::Tag { what: "model kind", value }),
    }
}

pub fn save(net: &Network, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_network(net, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network, CheckpointError> {
    read_network(io::BufReader::new(fs::File::open(path)?))
}
