use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, ParamSet, Result, TensorBuf};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    /// `x * sigmoid(x)`
    Silu,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Linear => x,
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative evaluated at the pre-activation `x`.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Linear => T::one(),
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "linear" => Activation::Linear,
            "silu" => Activation::Silu,
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            _ => return None,
        })
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Layer widths including the input width, e.g. `[6, 64, 64]` is two layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], hidden: Activation) -> Self {
        Self {
            widths: widths.to_vec(),
            hidden,
            output: Activation::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(NnError::Spec("an MLP needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(NnError::Spec(format!("zero width in {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn describe(&self) -> String {
        let w: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "{}:{}:{}",
            w.join(","),
            self.hidden.name(),
            self.output.name()
        )
    }
}

/// Affine layer `y = x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: TensorBuf<T>,
    pub bias: TensorBuf<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: TensorBuf::zeros(&[fan_in, fan_out]),
            bias: TensorBuf::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub spec: MlpSpec,
    pub layers: Vec<Dense<T>>,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<TensorBuf<T>>,
    pre: Vec<TensorBuf<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// weights and biases.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        let mut mlp = Self::zeros(spec)?;
        for layer in &mut mlp.layers {
            let bound = 1.0 / (layer.fan_in() as f64).sqrt();
            for w in layer.weight.data.iter_mut() {
                *w = T::lit(rng.gen_range(-bound..bound));
            }
            for b in layer.bias.data.iter_mut() {
                *b = T::lit(rng.gen_range(-bound..bound));
            }
        }
        Ok(mlp)
    }

    /// Multiplies the last layer's parameters by `k`.
    pub fn scale_output_layer(&mut self, k: T) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.data.iter_mut().for_each(|w| *w *= k);
            last.bias.data.iter_mut().for_each(|b| *b *= k);
        }
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.spec.output
        } else {
            self.spec.hidden
        }
    }

    /// Batched forward pass over the rows of `input`.
    pub fn forward(&self, input: &TensorBuf<T>) -> Result<(TensorBuf<T>, MlpCache<T>)> {
        if input.shape.len() != 2 || input.cols() != self.input_width() {
            return Err(NnError::Shape {
                context: "mlp_forward",
                expected: vec![input.rows(), self.input_width()],
                got: input.shape.clone(),
            });
        }
        let rows = input.rows();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (fi, fo) = (layer.fan_in(), layer.fan_out());
            let mut z = TensorBuf::zeros(&[rows, fo]);
            for r in 0..rows {
                z.row_mut(r).copy_from_slice(&layer.bias.data);
            }
            T::gemm(
                rows,
                fi,
                fo,
                T::one(),
                &x.data,
                fi as isize,
                1,
                &layer.weight.data,
                fo as isize,
                1,
                T::one(),
                &mut z.data,
                fo as isize,
                1,
            );
            let act = self.activation(l);
            let y = TensorBuf {
                shape: z.shape.clone(),
                data: z.data.iter().map(|&v| act.apply(v)).collect(),
            };
            cache.inputs.push(x);
            cache.pre.push(z);
            x = y;
        }
        x.check_finite("mlp_forward")?;
        Ok((x, cache))
    }

    /// Forward pass that discards the cache.
    pub fn predict(&self, input: &TensorBuf<T>) -> Result<TensorBuf<T>> {
        self.forward(input).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient for upstream gradient `dy`.
    pub fn backward_into(
        &self,
        cache: &MlpCache<T>,
        dy: &TensorBuf<T>,
        grads: &mut Mlp<T>,
    ) -> Result<TensorBuf<T>> {
        let rows = cache.inputs.first().map(|x| x.rows()).unwrap_or(0);
        if dy.shape != [rows, self.output_width()] {
            return Err(NnError::Shape {
                context: "mlp_backward",
                expected: vec![rows, self.output_width()],
                got: dy.shape.clone(),
            });
        }
        if grads.spec.widths != self.spec.widths {
            return Err(NnError::Shape {
                context: "mlp_backward grads",
                expected: self.spec.widths.clone(),
                got: grads.spec.widths.clone(),
            });
        }
        let mut upstream = dy.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (fi, fo) = (layer.fan_in(), layer.fan_out());
            let act = self.activation(l);
            let pre = &cache.pre[l];
            let dz = if act == Activation::Linear {
                upstream
            } else {
                TensorBuf {
                    shape: upstream.shape.clone(),
                    data: upstream
                        .data
                        .iter()
                        .zip(&pre.data)
                        .map(|(&g, &z)| g * act.derivative(z))
                        .collect(),
                }
            };
            let x = &cache.inputs[l];
            let g = &mut grads.layers[l];
            // dW += x^T dz
            T::gemm(
                fi,
                rows,
                fo,
                T::one(),
                &x.data,
                1,
                fi as isize,
                &dz.data,
                fo as isize,
                1,
                T::one(),
                &mut g.weight.data,
                fo as isize,
                1,
            );
            for r in 0..rows {
                for (b, &d) in g.bias.data.iter_mut().zip(dz.row(r)) {
                    *b += d;
                }
            }
            // dx = dz W^T
            let mut dx = TensorBuf::zeros(&[rows, fi]);
            T::gemm(
                rows,
                fo,
                fi,
                T::one(),
                &dz.data,
                fo as isize,
                1,
                &layer.weight.data,
                1,
                fo as isize,
                T::zero(),
                &mut dx.data,
                fi as isize,
                1,
            );
            upstream = dx;
        }
        Ok(upstream)
    }

    /// Convenience wrapper returning fresh gradients.
    pub fn backward(
        &self,
        cache: &MlpCache<T>,
        dy: &TensorBuf<T>,
    ) -> Result<(Mlp<T>, TensorBuf<T>)> {
        let mut grads = Mlp::zeros(&self.spec)?;
        let dx = self.backward_into(cache, dy, &mut grads)?;
        Ok((grads, dx))
    }
}

impl<T: Real> ParamSet<T> for Mlp<T> {
    fn tensors(&self) -> Vec<&TensorBuf<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut TensorBuf<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(&[3, 3], Activation::Silu);
        let mut mlp = Mlp::<f64>::zeros(&spec).unwrap();
        for i in 0..3 {
            mlp.layers[0].weight.data[i * 3 + i] = 1.0;
        }
        let x = TensorBuf::from_vec(&[2, 3], vec![0.1, -2.0, 3.5, 4.0, 0.0, -1.0]).unwrap();
        assert_eq!(mlp.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let spec = MlpSpec::new(&[4, 8, 2], Activation::Silu);
        let mlp = Mlp::<f64>::zeros(&spec).unwrap();
        let x = TensorBuf::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(mlp.predict(&x).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_two_by_two() {
        // W = [[1, 2], [3, 4]] (in x out), b = [0.5, -1]; x = [1, -1]
        // y = [1*1 + -1*3 + 0.5, 1*2 + -1*4 - 1] = [-1.5, -3]
        let spec = MlpSpec::new(&[2, 2], Activation::Tanh);
        let mut mlp = Mlp::<f64>::zeros(&spec).unwrap();
        mlp.layers[0].weight.data = vec![1.0, 2.0, 3.0, 4.0];
        mlp.layers[0].bias.data = vec![0.5, -1.0];
        let x = TensorBuf::row_vector(vec![1.0, -1.0]);
        assert_eq!(mlp.predict(&x).unwrap().data, vec![-1.5, -3.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::new(&[3, 5, 2], Activation::Silu);
        let mlp = Mlp::<f64>::init(&spec, &mut rng).unwrap();
        let x = TensorBuf::from_vec(&[2, 3], vec![0.3, -0.1, 0.7, 1.0, 0.2, -0.4]).unwrap();
        let (_, cache) = mlp.forward(&x).unwrap();
        let (g, dx) = mlp.backward(&cache, &TensorBuf::zeros(&[2, 2])).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(dx.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_input_gradient_is_transpose_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::new(&[3, 2], Activation::Linear);
        let mlp = Mlp::<f64>::init(&spec, &mut rng).unwrap();
        let x = TensorBuf::row_vector(vec![0.2, 0.4, -0.6]);
        let (_, cache) = mlp.forward(&x).unwrap();
        let dy = TensorBuf::row_vector(vec![1.5, -0.5]);
        let (_, dx) = mlp.backward(&cache, &dy).unwrap();
        let w = &mlp.layers[0].weight.data;
        for i in 0..3 {
            let expect = w[i * 2] * 1.5 + w[i * 2 + 1] * -0.5;
            assert!((dx.data[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let spec = MlpSpec::new(&[3, 2], Activation::Linear);
        let mlp = Mlp::<f64>::zeros(&spec).unwrap();
        let x = TensorBuf::row_vector(vec![1.0, 2.0]);
        assert!(matches!(mlp.forward(&x), Err(NnError::Shape { .. })));
    }

    #[test]
    fn generic_over_f32() {
        let spec = MlpSpec::new(&[2, 4, 1], Activation::Silu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::<f32>::init(&spec, &mut rng).unwrap();
        let y = mlp
            .predict(&TensorBuf::row_vector(vec![0.5f32, -0.5]))
            .unwrap();
        assert!(y.data[0].is_finite());
    }
}
