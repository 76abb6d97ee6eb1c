use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::tape::{silu, Bound, Tape, Var};
use crate::numerics::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Silu => silu(x),
        }
    }
}

/// One dense layer: `y = x·W + b`, with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Evaluates a stack of dense layers on a single input vector. The
/// activation is applied between layers, not after the last one.
pub fn mlp_forward(layers: &[Linear], input: &[f64], activation: Activation) -> Result<Vec<f64>> {
    let mut x = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let (din, dout) = (layer.weight.rows(), layer.weight.cols());
        if x.len() != din {
            return Err(Error::LayerDims {
                layer: i,
                expected: din,
                actual: x.len(),
            });
        }
        if layer.bias.len() != dout {
            return Err(Error::LayerDims {
                layer: i,
                expected: dout,
                actual: layer.bias.len(),
            });
        }
        let w = layer.weight.data();
        let mut y = layer.bias.data().to_vec();
        for (p, &xp) in x.iter().enumerate() {
            for (o, &wv) in y.iter_mut().zip(&w[p * dout..(p + 1) * dout]) {
                *o += xp * wv;
            }
        }
        if i + 1 < layers.len() {
            for v in &mut y {
                *v = activation.apply(*v);
            }
        }
        x = y;
    }
    Ok(x)
}

/// Layout of a perceptron whose weights live in a [`ParamSet`] under a
/// name prefix (`{prefix}.{layer}.w`, `{prefix}.{layer}.b`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        Self {
            dims: dims.to_vec(),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    /// Adds Gaussian-initialized weights (std `gain/√fan_in`) and zero biases.
    pub fn init(
        &self,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut impl Rng,
        gain: f64,
        trainable: bool,
    ) -> Result<()> {
        for l in 0..self.depth() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let std = gain / (din as f64).sqrt();
            let w = Tensor::from_fn(&[din, dout], |_| std * rng.sample::<f64, _>(StandardNormal));
            params.insert(format!("{prefix}.{l}.w"), w, trainable)?;
            params.insert(format!("{prefix}.{l}.b"), Tensor::zeros(&[1, dout]), trainable)?;
        }
        Ok(())
    }

    pub fn linears(&self, params: &ParamSet, prefix: &str) -> Result<Vec<Linear>> {
        (0..self.depth())
            .map(|l| {
                Ok(Linear {
                    weight: params.value(&format!("{prefix}.{l}.w"))?.clone(),
                    bias: params.value(&format!("{prefix}.{l}.b"))?.clone(),
                })
            })
            .collect()
    }

    /// Row-batched forward on a tape: `x` is `rows × in_dim`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let (_, c) = tape.shape(x);
        if c != self.in_dim() {
            return Err(Error::LayerDims {
                layer: 0,
                expected: self.in_dim(),
                actual: c,
            });
        }
        let mut h = x;
        for l in 0..self.depth() {
            let w = bound.get(&format!("{prefix}.{l}.w"))?;
            let b = bound.get(&format!("{prefix}.{l}.b"))?;
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if l + 1 < self.depth() && self.activation == Activation::Silu {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_return_bias() {
        let layer = Linear {
            weight: Tensor::zeros(&[3, 2]),
            bias: Tensor::row(&[0.5, -1.5]),
        };
        let y = mlp_forward(&[layer], &[1.0, 2.0, 3.0], Activation::Silu).unwrap();
        assert_eq!(y, vec![0.5, -1.5]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let layer = Linear {
            weight: eye,
            bias: Tensor::zeros(&[1, 3]),
        };
        let v = [0.3, -2.0, 7.5];
        assert_eq!(mlp_forward(&[layer], &v, Activation::Identity).unwrap(), v.to_vec());
    }

    #[test]
    fn dimension_mismatch_names_the_layer() {
        let l0 = Linear {
            weight: Tensor::zeros(&[2, 3]),
            bias: Tensor::zeros(&[1, 3]),
        };
        let l1 = Linear {
            weight: Tensor::zeros(&[4, 1]),
            bias: Tensor::zeros(&[1, 1]),
        };
        let err = mlp_forward(&[l0, l1], &[1.0, 1.0], Activation::Silu).unwrap_err();
        assert!(matches!(err, Error::LayerDims { layer: 1, .. }));
    }

    /// Independent oracle: explicit matrix-vector products with SiLU between.
    fn oracle(w0: &Tensor, b0: &Tensor, w1: &Tensor, b1: &Tensor, x: &[f64]) -> Vec<f64> {
        let (din, dh) = (w0.rows(), w0.cols());
        let dout = w1.cols();
        let mut h = vec![0.0; dh];
        for j in 0..dh {
            let mut s = b0.data()[j];
            for i in 0..din {
                s += x[i] * w0.at(&[i, j]);
            }
            h[j] = s / (1.0 + (-s).exp());
        }
        (0..dout)
            .map(|j| b1.data()[j] + (0..dh).map(|i| h[i] * w1.at(&[i, j])).sum::<f64>())
            .collect()
    }

    #[test]
    fn two_layer_net_matches_matrix_oracle_and_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = MlpSpec::new(&[5, 7, 3], Activation::Silu);
        let mut ps = ParamSet::new();
        spec.init(&mut ps, "m", &mut rng, 1.0, true).unwrap();
        ps.set_value("m.0.b", Tensor::from_fn(&[1, 7], |i| 0.1 * i as f64 - 0.3))
            .unwrap();
        ps.set_value("m.1.b", Tensor::row(&[0.2, -0.1, 0.05])).unwrap();
        let x: Vec<f64> = (0..5).map(|i| (i as f64 * 0.7).sin()).collect();
        let layers = spec.linears(&ps, "m").unwrap();
        let got = mlp_forward(&layers, &x, Activation::Silu).unwrap();
        let want = oracle(
            ps.value("m.0.w").unwrap(),
            ps.value("m.0.b").unwrap(),
            ps.value("m.1.w").unwrap(),
            ps.value("m.1.b").unwrap(),
            &x,
        );
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }

        let mut tape = Tape::new();
        let bound = tape.bind(&ps);
        let xv = tape.constant(&Tensor::row(&x));
        let y = spec.forward(&mut tape, &bound, "m", xv).unwrap();
        for (a, b) in tape.data(y).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
