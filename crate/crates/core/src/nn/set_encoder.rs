use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Mlp, MlpCache, MlpSpec, NnError, ParamSet, Result, TensorBuf};
use crate::scalar::Real;

/// Shared per-point network followed by a max over points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetEncoderSpec {
    /// Per-point widths including the point dimension, e.g. `[2, 32, 64]`.
    pub point_widths: Vec<usize>,
    pub hidden: Activation,
}

impl SetEncoderSpec {
    pub fn new(point_widths: &[usize], hidden: Activation) -> Self {
        Self {
            point_widths: point_widths.to_vec(),
            hidden,
        }
    }

    pub fn feature_width(&self) -> usize {
        *self.point_widths.last().unwrap_or(&0)
    }

    pub fn point_dim(&self) -> usize {
        self.point_widths.first().copied().unwrap_or(0)
    }

    fn mlp_spec(&self) -> MlpSpec {
        MlpSpec::new(&self.point_widths, self.hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetEncoder<T> {
    pub spec: SetEncoderSpec,
    pub point_net: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct SetCache<T> {
    mlp: MlpCache<T>,
    /// Row index (within the whole batch) that won the max, per set and feature.
    argmax: Vec<usize>,
    batch: usize,
    set_len: usize,
}

impl<T: Real> SetEncoder<T> {
    pub fn zeros(spec: &SetEncoderSpec) -> Result<Self> {
        Ok(Self {
            spec: spec.clone(),
            point_net: Mlp::zeros(&spec.mlp_spec())?,
        })
    }

    pub fn init<R: Rng + ?Sized>(spec: &SetEncoderSpec, rng: &mut R) -> Result<Self> {
        Ok(Self {
            spec: spec.clone(),
            point_net: Mlp::init(&spec.mlp_spec(), rng)?,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.spec.feature_width()
    }

    /// Encodes `points.rows() / set_len` sets stacked row-wise.
    pub fn forward(
        &self,
        points: &TensorBuf<T>,
        set_len: usize,
    ) -> Result<(TensorBuf<T>, SetCache<T>)> {
        if set_len == 0 || points.rows() == 0 {
            return Err(NnError::EmptySet);
        }
        if !points.rows().is_multiple_of(set_len) || points.cols() != self.spec.point_dim() {
            return Err(NnError::Shape {
                context: "set_encode",
                expected: vec![set_len, self.spec.point_dim()],
                got: points.shape.clone(),
            });
        }
        let batch = points.rows() / set_len;
        let (per_point, mlp) = self.point_net.forward(points)?;
        let f = self.feature_width();
        let mut out = TensorBuf::zeros(&[batch, f]);
        let mut argmax = vec![0usize; batch * f];
        for b in 0..batch {
            let base = b * set_len;
            let dst = out.row_mut(b);
            dst.copy_from_slice(per_point.row(base));
            let am = &mut argmax[b * f..(b + 1) * f];
            am.iter_mut().for_each(|a| *a = base);
            for r in base + 1..base + set_len {
                for (j, &v) in per_point.row(r).iter().enumerate() {
                    if v > dst[j] {
                        dst[j] = v;
                        am[j] = r;
                    }
                }
            }
        }
        Ok((
            out,
            SetCache {
                mlp,
                argmax,
                batch,
                set_len,
            },
        ))
    }

    /// Encodes a single set given as a list of points.
    pub fn encode(&self, points: &[[T; 2]]) -> Result<Vec<T>> {
        if points.is_empty() {
            return Err(NnError::EmptySet);
        }
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        let buf = TensorBuf::from_vec(&[points.len(), 2], data)?;
        Ok(self.forward(&buf, points.len())?.0.data)
    }

    /// Accumulates parameter gradients and returns per-point gradients.
    pub fn backward_into(
        &self,
        cache: &SetCache<T>,
        dfeat: &TensorBuf<T>,
        grads: &mut SetEncoder<T>,
    ) -> Result<TensorBuf<T>> {
        let f = self.feature_width();
        if dfeat.shape != [cache.batch, f] {
            return Err(NnError::Shape {
                context: "set_encode_backward",
                expected: vec![cache.batch, f],
                got: dfeat.shape.clone(),
            });
        }
        let mut dper = TensorBuf::zeros(&[cache.batch * cache.set_len, f]);
        for b in 0..cache.batch {
            for j in 0..f {
                let r = cache.argmax[b * f + j];
                dper.data[r * f + j] += dfeat.data[b * f + j];
            }
        }
        self.point_net
            .backward_into(&cache.mlp, &dper, &mut grads.point_net)
    }
}

impl<T: Real> ParamSet<T> for SetEncoder<T> {
    fn tensors(&self) -> Vec<&TensorBuf<T>> {
        self.point_net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut TensorBuf<T>> {
        self.point_net.tensors_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(seed: u64) -> SetEncoder<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SetEncoder::init(
            &SetEncoderSpec::new(&[2, 16, 24], Activation::Silu),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn permutation_gives_identical_feature() {
        let enc = encoder(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts: Vec<[f64; 2]> = (0..20)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let a = enc.encode(&pts).unwrap();
        pts.shuffle(&mut rng);
        let b = enc.encode(&pts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicated_point_matches_single() {
        let enc = encoder(9);
        let p = [0.3, -0.2];
        let one = enc.encode(&[p]).unwrap();
        let many = enc.encode(&[p; 17]).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn empty_set_is_rejected() {
        let enc = encoder(1);
        assert!(matches!(enc.encode(&[]), Err(NnError::EmptySet)));
    }

    #[test]
    fn batch_forward_matches_individual_sets() {
        let enc = encoder(2);
        let s1 = [[0.1, 0.2], [0.3, -0.4], [-0.5, 0.6]];
        let s2 = [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let data: Vec<f64> = s1.iter().chain(&s2).flat_map(|p| p.to_vec()).collect();
        let buf = TensorBuf::from_vec(&[6, 2], data).unwrap();
        let (out, _) = enc.forward(&buf, 3).unwrap();
        assert_eq!(out.row(0), enc.encode(&s1).unwrap().as_slice());
        assert_eq!(out.row(1), enc.encode(&s2).unwrap().as_slice());
    }
}
