//! Minimal feed-forward network engine with manual backpropagation.
//!
//! Gradients are produced with respect to both parameters (for training)
//! and inputs (for the attack optimizers).

pub mod io;
pub mod train;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One layer of a [`Network`]: a dense affine map or a parameter-free
/// activation.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S> {
    /// `z = xW + b`, weights shape `[in_dim, out_dim]`, bias `[out_dim]`.
    Dense { weights: Tensor<S>, bias: Tensor<S> },
    Relu,
    Sigmoid,
}

impl<S: Scalar> Layer<S> {
    pub fn dense(weights: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "dense weights must be rank 2, got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[1]] {
            return Err(Error::Shape(format!(
                "dense bias shape {:?} does not match weights {:?}",
                bias.shape(),
                weights.shape()
            )));
        }
        Ok(Layer::Dense { weights, bias })
    }

    /// Dense layer with Xavier-uniform weights in
    /// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]` and zero bias.
    pub fn dense_init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = S::of((6.0 / (in_dim + out_dim) as f64).sqrt());
        let data = (0..in_dim * out_dim)
            .map(|_| S::uniform(rng, -limit, limit))
            .collect();
        Layer::Dense {
            weights: Tensor::new(vec![in_dim, out_dim], data).unwrap(),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    /// Output dimension given `input_dim`, or an error if the layer cannot
    /// accept it.
    fn out_dim(&self, index: usize, input_dim: usize) -> Result<usize> {
        match self {
            Layer::Dense { weights, .. } => {
                let (w_in, w_out) = (weights.shape()[0], weights.shape()[1]);
                if w_in != input_dim {
                    return Err(Error::Dimension {
                        layer: index,
                        expected: w_in,
                        got: input_dim,
                    });
                }
                Ok(w_out)
            }
            Layer::Relu | Layer::Sigmoid => Ok(input_dim),
        }
    }

    fn apply(&self, input: &Tensor<S>) -> Tensor<S> {
        match self {
            Layer::Dense { weights, bias } => {
                let (in_dim, out_dim) = (weights.shape()[0], weights.shape()[1]);
                debug_assert_eq!(input.len(), in_dim);
                let mut out = bias.data().to_vec();
                let w = weights.data();
                for (i, &x) in input.data().iter().enumerate() {
                    let row = &w[i * out_dim..(i + 1) * out_dim];
                    for (o, &wij) in out.iter_mut().zip(row) {
                        *o = wij.mul_add(x, *o);
                    }
                }
                Tensor::from_vec(out)
            }
            Layer::Relu => input.map(|v| if v > S::zero() { v } else { S::zero() }),
            Layer::Sigmoid => input.map(sigmoid),
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(z: S) -> S {
    S::one() / (S::one() + (-z).exp())
}

/// Ordered layer stack with validated dimension chaining.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    layers: Vec<Layer<S>>,
    input_dim: usize,
    output_dim: usize,
}

/// All intermediate activations of one forward pass: the input first,
/// then one entry per layer, final output last.
#[derive(Debug, Clone)]
pub struct ActivationTrace<S> {
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ActivationTrace<S> {
    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn input(&self) -> &Tensor<S> {
        &self.values[0]
    }

    pub fn output(&self) -> &Tensor<S> {
        self.values.last().expect("trace is never empty")
    }
}

/// Parameter gradients of one dense layer.
#[derive(Debug, Clone)]
pub struct DenseGrads<S> {
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Result of a backward pass: one entry per layer (activations carry
/// `None`) plus the gradient with respect to the input.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub layers: Vec<Option<DenseGrads<S>>>,
    pub input: Tensor<S>,
}

impl<S: Scalar> Network<S> {
    /// Builds a network, validating that layer dimensions chain.
    pub fn new(input_dim: usize, layers: Vec<Layer<S>>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Argument("input_dim must be positive".into()));
        }
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            dim = layer.out_dim(i, dim)?;
        }
        Ok(Self {
            layers,
            input_dim,
            output_dim: dim,
        })
    }

    /// Dense stack `input -> hidden[0] -> ... -> output` with ReLU between
    /// dense layers and no activation after the last one.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut dim = input_dim;
        for &h in hidden {
            layers.push(Layer::dense_init(dim, h, rng));
            layers.push(Layer::Relu);
            dim = h;
        }
        layers.push(Layer::dense_init(dim, output_dim, rng));
        Network::new(input_dim, layers)
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Runs the network, recording every intermediate activation.
    pub fn forward(&self, input: &Tensor<S>) -> Result<ActivationTrace<S>> {
        if input.shape() != [self.input_dim] {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.input_dim,
                got: input.len(),
            });
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.clone());
        for layer in &self.layers {
            let next = layer.apply(values.last().unwrap());
            values.push(next);
        }
        Ok(ActivationTrace { values })
    }

    /// Backpropagates `output_grad` through a trace produced by
    /// [`Network::forward`], returning parameter gradients per layer and
    /// the gradient with respect to the input.
    pub fn backward(
        &self,
        trace: &ActivationTrace<S>,
        output_grad: &Tensor<S>,
    ) -> Result<Gradients<S>> {
        if trace.values.len() != self.layers.len() + 1 {
            return Err(Error::Structure(format!(
                "trace has {} entries, network with {} layers needs {}",
                trace.values.len(),
                self.layers.len(),
                self.layers.len() + 1
            )));
        }
        if output_grad.len() != self.output_dim {
            return Err(Error::Structure(format!(
                "output grad has {} entries, network output is {}",
                output_grad.len(),
                self.output_dim
            )));
        }

        let mut layer_grads: Vec<Option<DenseGrads<S>>> = vec![None; self.layers.len()];
        let mut grad = output_grad.clone();

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.values[i];
            let output = &trace.values[i + 1];
            if output.len() != grad.len() {
                return Err(Error::Structure(format!(
                    "trace entry {} does not match network layer {}",
                    i + 1,
                    i
                )));
            }
            grad = match layer {
                Layer::Dense { weights, .. } => {
                    let (in_dim, out_dim) = (weights.shape()[0], weights.shape()[1]);
                    if input.len() != in_dim {
                        return Err(Error::Structure(format!(
                            "trace entry {i} does not match dense layer {i} input"
                        )));
                    }
                    let dz = grad.data();
                    let mut dw = vec![S::zero(); in_dim * out_dim];
                    for (r, &x) in input.data().iter().enumerate() {
                        let row = &mut dw[r * out_dim..(r + 1) * out_dim];
                        for (d, &g) in row.iter_mut().zip(dz) {
                            *d = g * x;
                        }
                    }
                    let mut dx = vec![S::zero(); in_dim];
                    let w = weights.data();
                    for (r, d) in dx.iter_mut().enumerate() {
                        let row = &w[r * out_dim..(r + 1) * out_dim];
                        let mut acc = S::zero();
                        for (&wij, &g) in row.iter().zip(dz) {
                            acc = wij.mul_add(g, acc);
                        }
                        *d = acc;
                    }
                    layer_grads[i] = Some(DenseGrads {
                        weights: Tensor::new(vec![in_dim, out_dim], dw)?,
                        bias: grad.clone(),
                    });
                    Tensor::from_vec(dx)
                }
                Layer::Relu => {
                    let dx = output
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&y, &g)| if y > S::zero() { g } else { S::zero() })
                        .collect();
                    Tensor::from_vec(dx)
                }
                Layer::Sigmoid => {
                    let dx = output
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&y, &g)| g * y * (S::one() - y))
                        .collect();
                    Tensor::from_vec(dx)
                }
            };
        }

        Ok(Gradients {
            layers: layer_grads,
            input: grad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn identity_dense(dim: usize) -> Layer<f64> {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Layer::dense(
            Tensor::new(vec![dim, dim], w).unwrap(),
            Tensor::zeros(vec![dim]),
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_is_identity() {
        let net = Network::new(3, vec![identity_dense(3)]).unwrap();
        let x = Tensor::from_vec(vec![0.3, -1.2, 7.0]);
        let trace = net.forward(&x).unwrap();
        assert_eq!(trace.output(), &x);
        assert_eq!(trace.values().len(), 2);
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = Network::new(3, vec![Layer::Relu]).unwrap();
        let trace = net.forward(&Tensor::from_vec(vec![-1.0, 2.0, 0.0])).unwrap();
        assert_eq!(trace.output().data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn forward_matches_hand_multiplied_matrices() {
        // Independent oracle: naive matrix products computed right here.
        let mut rng = StdRng::seed_from_u64(7);
        let net = Network::mlp(3, &[4], 2, &mut rng).unwrap();
        let x = vec![0.25, -0.5, 1.5];

        let dense = |layer: &Layer<f64>, input: &[f64]| -> Vec<f64> {
            let Layer::Dense { weights, bias } = layer else {
                panic!("expected dense");
            };
            let out_dim = weights.shape()[1];
            (0..out_dim)
                .map(|j| {
                    bias.data()[j]
                        + input
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| v * weights.at2(i, j))
                            .sum::<f64>()
                })
                .collect()
        };

        let h = dense(&net.layers()[0], &x);
        let h: Vec<f64> = h.into_iter().map(|v| v.max(0.0)).collect();
        let expected = dense(&net.layers()[2], &h);

        let got = net.forward(&Tensor::from_vec(x)).unwrap();
        for (a, b) in got.output().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let net = Network::new(3, vec![identity_dense(3)]).unwrap();
        let err = net.forward(&Tensor::from_vec(vec![1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 3, got: 2, .. }));
    }

    #[test]
    fn construction_rejects_broken_chain() {
        let layer: Layer<f64> = Layer::dense_init(3, 2, &mut StdRng::seed_from_u64(0));
        let bad = Network::new(2, vec![layer]);
        assert!(matches!(bad, Err(Error::Dimension { layer: 0, .. })));
    }

    #[test]
    fn single_dense_input_grad_is_weight_column() {
        // Loss = output[0]  =>  d loss / d x = first weight column.
        let w = Tensor::new(vec![3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        let net = Network::new(
            3,
            vec![Layer::dense(w, Tensor::zeros(vec![2])).unwrap()],
        )
        .unwrap();
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        let trace = net.forward(&x).unwrap();
        let grads = net
            .backward(&trace, &Tensor::from_vec(vec![1.0, 0.0]))
            .unwrap();
        assert_eq!(grads.input.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let net = Network::new(2, vec![Layer::Relu]).unwrap();
        let trace = net.forward(&Tensor::from_vec(vec![-3.0, 3.0])).unwrap();
        let grads = net
            .backward(&trace, &Tensor::from_vec(vec![1.0, 1.0]))
            .unwrap();
        assert_eq!(grads.input.data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let mut rng = StdRng::seed_from_u64(1);
        let net = Network::mlp(3, &[4], 2, &mut rng).unwrap();
        let other = Network::new(3, vec![identity_dense(3)]).unwrap();
        let trace = other.forward(&Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        let err = net
            .backward(&trace, &Tensor::from_vec(vec![1.0, 0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(3);
        let net = Network::mlp(4, &[8, 8], 3, &mut rng).unwrap();
        let x = Tensor::from_vec(vec![0.1, -0.2, 0.3, -0.4]);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a.output(), b.output());
    }

    #[test]
    fn generic_core_works_at_f32() {
        let mut rng = StdRng::seed_from_u64(5);
        let net: Network<f32> = Network::mlp(2, &[3], 2, &mut rng).unwrap();
        let trace = net
            .forward(&Tensor::from_vec(vec![0.5f32, -0.5f32]))
            .unwrap();
        assert_eq!(trace.output().len(), 2);
    }
}
