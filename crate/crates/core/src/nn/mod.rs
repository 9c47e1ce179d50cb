//! Hand-differentiated function approximators: dense networks, a max-pooled
//! point-set encoder, an adaptive-moment optimizer and the checkpoint format.

mod adam;
mod checkpoint;
mod mlp;
mod set_encoder;
mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, OptState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{Activation, Dense, Mlp, MlpCache, MlpSpec};
pub use set_encoder::{SetCache, SetEncoder, SetEncoderSpec};
pub use tensor::TensorBuf;

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("point set is empty")]
    EmptySet,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// A model whose parameters are an ordered list of tensors.
///
/// Gradients are represented by a value of the same type, so optimizers and
/// checkpoints can walk parameters and gradients in lockstep.
pub trait ParamSet<T: Real> {
    fn tensors(&self) -> Vec<&TensorBuf<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut TensorBuf<T>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    fn scale(&mut self, k: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= k);
        }
    }

    fn global_norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Flattened copy of every parameter, in declared order.
    fn flat(&self) -> Vec<T> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    fn set_flat(&mut self, values: &[T]) -> Result<()> {
        let total = self.num_params();
        if values.len() != total {
            return Err(NnError::Shape {
                context: "set_flat",
                expected: vec![total],
                got: vec![values.len()],
            });
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Little-endian bytes of every parameter; used for frozen-parameter checks.
    fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in self.tensors() {
            for &x in &t.data {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
        out
    }

    /// Stores every tensor under `prefix.<index>`.
    fn write_arrays(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (i, t) in self.tensors().iter().enumerate() {
            ckpt.push_array(
                format!("{prefix}.{i}"),
                t.shape.clone(),
                t.data.iter().map(|x| x.as_f64()).collect(),
            );
        }
    }

    /// Loads tensors written by [`ParamSet::write_arrays`] under the same prefix.
    fn read_arrays(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (i, t) in self.tensors_mut().into_iter().enumerate() {
            let name = format!("{prefix}.{i}");
            let (shape, data) = ckpt
                .array(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing array {name}")))?;
            if shape != t.shape.as_slice() {
                return Err(NnError::Shape {
                    context: "checkpoint array",
                    expected: t.shape.clone(),
                    got: shape.to_vec(),
                });
            }
            for (dst, &src) in t.data.iter_mut().zip(data) {
                *dst = T::lit(src);
            }
        }
        Ok(())
    }
}
