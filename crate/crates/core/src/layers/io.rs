//! Little-endian binary weight file.
//!
//! Layout:
//!
//! ```text
//! magic        b"ATNB"
//! version      u32
//! config       layer_kind u32, num_layers u32, dim u32, heads u32, ff_mult u32,
//!              conv_kernel u32, persistent_slots u32, activation u32,
//!              value_mult u32, seed u64
//! per layer    kept heads u32, flags u32 (bit 0: layer computes its own map)
//! matrices     rows u32, cols u32, rows*cols f32, in `ModelWeights::params` order
//! ```
//!
//! Per layer the order is: for each head query weight/bias, key weight/bias,
//! value weight/bias, positional block, persistent keys, persistent values
//! (absent ones skipped); then the output projection and its bias; then the
//! remaining submodules in forward order (LayerNorm gain before bias, each
//! linear weight before its bias).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::{LayerKind, ModelConfig};
use super::weights::{build, LayerShape, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::Activation;

pub const MAGIC: [u8; 4] = *b"ATNB";
pub const FORMAT_VERSION: u32 = 1;

fn activation_code(a: Activation) -> u32 {
    match a {
        Activation::Relu => 0,
        Activation::Swish => 1,
        Activation::Gelu => 2,
        Activation::Glu => 3,
    }
}

fn activation_from(code: u32) -> Result<Activation> {
    Ok(match code {
        0 => Activation::Relu,
        1 => Activation::Swish,
        2 => Activation::Gelu,
        3 => Activation::Glu,
        c => return Err(Error::Format(format!("unknown activation code {c}"))),
    })
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_weights(w: &ModelWeights, out: &mut impl Write) -> Result<()> {
    let c = &w.config;
    out.write_all(&MAGIC)?;
    put_u32(out, FORMAT_VERSION)?;
    put_u32(out, c.layer_kind.code())?;
    for (v, name) in [
        (c.num_layers, "num_layers"),
        (c.dim, "dim"),
        (c.heads, "heads"),
        (c.ff_mult, "ff_mult"),
        (c.conv_kernel, "conv_kernel"),
        (c.persistent_slots, "persistent_slots"),
    ] {
        put_u32(out, to_u32(v, name)?)?;
    }
    put_u32(out, activation_code(c.activation))?;
    put_u32(out, to_u32(c.value_mult, "value_mult")?)?;
    out.write_all(&c.seed.to_le_bytes())?;
    for s in w.layer_shapes() {
        put_u32(out, to_u32(s.heads, "heads")?)?;
        put_u32(out, u32::from(s.computes_map))?;
    }
    for p in w.params() {
        put_u32(out, to_u32(p.rows, "rows")?)?;
        put_u32(out, to_u32(p.cols, "cols")?)?;
        for v in p.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_weights(input: &mut impl Read) -> Result<ModelWeights> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(input)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = get_u32(input)?;
    let layer_kind = LayerKind::from_code(kind)
        .ok_or_else(|| Error::Format(format!("unknown layer kind {kind}")))?;
    let mut next = || get_u32(input).map(|v| v as usize);
    let (num_layers, dim, heads, ff_mult, conv_kernel, persistent_slots) =
        (next()?, next()?, next()?, next()?, next()?, next()?);
    let activation = activation_from(get_u32(input)?)?;
    let value_mult = get_u32(input)? as usize;
    let seed = get_u64(input)?;
    let config = ModelConfig {
        layer_kind,
        num_layers,
        dim,
        heads,
        ff_mult,
        conv_kernel,
        persistent_slots,
        activation,
        value_mult,
        seed,
    };
    config.validate()?;
    let mut shapes = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let heads = get_u32(input)? as usize;
        let flags = get_u32(input)?;
        if heads > config.heads || flags > 1 {
            return Err(Error::Format(format!(
                "bad layer header (heads {heads}, flags {flags})"
            )));
        }
        shapes.push(LayerShape {
            heads,
            computes_map: flags & 1 == 1,
        });
    }
    let mut w = build(&config, &shapes, false);
    for (i, p) in w.params_mut().into_iter().enumerate() {
        let (rows, cols) = (get_u32(input)? as usize, get_u32(input)? as usize);
        if (rows, cols) != (p.rows, p.cols) {
            return Err(Error::Format(format!(
                "tensor {i}: stored {rows}x{cols}, expected {}x{}",
                p.rows, p.cols
            )));
        }
        let mut buf = vec![0u8; rows * cols * 4];
        input.read_exact(&mut buf)?;
        for (dst, chunk) in p.values.iter_mut().zip(buf.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(w)
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_weights(w, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    read_weights(&mut BufReader::new(File::open(path)?))
}
