//! Model serialization.
//!
//! Self-describing little-endian binary layout:
//!
//! ```text
//! magic          8 bytes   "NFMLPBIN"
//! version        u8        currently 1
//! flags          u8        bit 0: biases enabled
//! input_dim      u32
//! layer_count    u32
//! per layer:     width u32, activation u8 (0 = relu, 1 = linear)
//! per layer:     weights row-major f64[width * fan_in], bias f64[width]
//! ```
//!
//! The reader rejects wrong magic, unknown versions, truncated files,
//! inconsistent shapes, non-finite parameters, and trailing bytes; a failed
//! load never yields a partial model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::{Activation, LayerSpec, MlpModel};

const MAGIC: &[u8; 8] = b"NFMLPBIN";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u8),
    #[error("model file is truncated")]
    Truncated,
    #[error("unknown activation tag {0}")]
    BadActivationTag(u8),
    #[error("inconsistent shape in model file: {0}")]
    ShapeInconsistency(String),
    #[error("model file contains a non-finite parameter")]
    NonFiniteParameter,
    #[error("trailing bytes after model data")]
    TrailingData,
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), ModelIoError> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                ModelIoError::Truncated
            } else {
                ModelIoError::Io(e)
            }
        })
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64_block(&mut self, count: usize) -> Result<Vec<f64>, ModelIoError> {
        let mut bytes = vec![0u8; count * 8];
        self.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

impl MlpModel {
    /// Writes the model to `path`; a round trip restores bit-identical
    /// parameters.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelIoError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, u8::from(self.bias_enabled)])?;
        w.write_all(&(self.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            w.write_all(&(layer.width as u32).to_le_bytes())?;
            let tag = match layer.activation {
                Activation::Relu => 0u8,
                Activation::Linear => 1u8,
            };
            w.write_all(&[tag])?;
        }
        for (weights, bias) in self.weights.iter().zip(&self.biases) {
            for r in 0..weights.nrows() {
                for c in 0..weights.ncols() {
                    w.write_all(&weights[(r, c)].to_le_bytes())?;
                }
            }
            for v in bias.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelIoError> {
        let mut r = Reader {
            inner: BufReader::new(File::open(path)?),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelIoError::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(ModelIoError::UnsupportedVersion(version));
        }
        let bias_enabled = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(ModelIoError::ShapeInconsistency(format!(
                    "invalid flags byte {other}"
                )))
            }
        };
        let input_dim = r.u32()? as usize;
        let layer_count = r.u32()? as usize;
        if input_dim == 0 || layer_count == 0 {
            return Err(ModelIoError::ShapeInconsistency(
                "input_dim and layer_count must be >= 1".into(),
            ));
        }
        // A hostile count would make us allocate blindly; cap it well above
        // anything this crate writes.
        if layer_count > 1024 || input_dim > 1 << 20 {
            return Err(ModelIoError::ShapeInconsistency(
                "unreasonable header sizes".into(),
            ));
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let width = r.u32()? as usize;
            if width == 0 || width > 1 << 20 {
                return Err(ModelIoError::ShapeInconsistency("zero-width layer".into()));
            }
            let activation = match r.u8()? {
                0 => Activation::Relu,
                1 => Activation::Linear,
                tag => return Err(ModelIoError::BadActivationTag(tag)),
            };
            layers.push(LayerSpec { width, activation });
        }
        if layers[layer_count - 1].activation != Activation::Linear {
            return Err(ModelIoError::ShapeInconsistency(
                "output layer must be linear".into(),
            ));
        }
        let mut weights = Vec::with_capacity(layer_count);
        let mut biases = Vec::with_capacity(layer_count);
        let mut fan_in = input_dim;
        for layer in &layers {
            let wdata = r.f64_block(layer.width * fan_in)?;
            let bdata = r.f64_block(layer.width)?;
            if wdata.iter().chain(&bdata).any(|v| !v.is_finite()) {
                return Err(ModelIoError::NonFiniteParameter);
            }
            weights.push(DMatrix::from_row_slice(layer.width, fan_in, &wdata));
            biases.push(DVector::from_vec(bdata));
            fan_in = layer.width;
        }
        let mut rest = [0u8; 1];
        match r.inner.read(&mut rest)? {
            0 => {}
            _ => return Err(ModelIoError::TrailingData),
        }
        Ok(MlpModel {
            input_dim,
            layers,
            weights,
            biases,
            bias_enabled,
        })
    }
}
