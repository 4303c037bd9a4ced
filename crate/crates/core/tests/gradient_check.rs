//! Central finite-difference checks for every analytical gradient the
//! engine produces: inputs and parameters, across all layer kinds.

use holmes_core::nn::{Layer, Network};
use holmes_core::{Scalar, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const H: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-4;

/// Scalar loss: a fixed random linear functional of the network output.
fn loss(net: &Network<f64>, x: &Tensor, direction: &[f64]) -> f64 {
    let out = net.forward(x).unwrap();
    out.output()
        .data()
        .iter()
        .zip(direction)
        .map(|(a, b)| a * b)
        .sum()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Random stack mixing Dense, ReLU and Sigmoid layers.
fn random_net(rng: &mut StdRng) -> Network<f64> {
    let input_dim = rng.gen_range(2..=5);
    let depth = rng.gen_range(1..=3);
    let mut layers = Vec::new();
    let mut dim = input_dim;
    for _ in 0..depth {
        let next = rng.gen_range(2..=6);
        layers.push(Layer::dense_init(dim, next, rng));
        match rng.gen_range(0..3) {
            0 => layers.push(Layer::Relu),
            1 => layers.push(Layer::Sigmoid),
            _ => {}
        }
        dim = next;
    }
    Network::new(input_dim, layers).unwrap()
}

/// Input whose trace keeps every ReLU pre-activation away from the kink,
/// so central differences stay on one side of it.
fn well_separated_input(net: &Network<f64>, rng: &mut StdRng) -> Tensor {
    'outer: for _ in 0..200 {
        let x = Tensor::from_vec(
            (0..net.input_dim())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        );
        let trace = net.forward(&x).unwrap();
        for (i, layer) in net.layers().iter().enumerate() {
            if matches!(layer, Layer::Relu) {
                let pre = &trace.values()[i];
                if pre.data().iter().any(|v| v.abs() < 1e-3) {
                    continue 'outer;
                }
            }
        }
        return x;
    }
    panic!("could not find an input clear of ReLU kinks");
}

#[test]
fn gradients_match_central_finite_differences() {
    let mut rng = StdRng::seed_from_u64(20_240_001);
    let mut worst = 0.0f64;

    for case in 0..25 {
        let mut net = random_net(&mut rng);
        let x = well_separated_input(&net, &mut rng);
        let direction: Vec<f64> = (0..net.output_dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let trace = net.forward(&x).unwrap();
        let grads = net
            .backward(&trace, &Tensor::from_vec(direction.clone()))
            .unwrap();

        // Input gradient.
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += H;
            let mut xm = x.clone();
            xm.data_mut()[i] -= H;
            let numeric = (loss(&net, &xp, &direction) - loss(&net, &xm, &direction)) / (2.0 * H);
            let err = rel_err(grads.input.data()[i], numeric);
            assert!(
                err < MAX_REL_ERR,
                "case {case}: input grad {i}: analytic {} numeric {numeric} err {err}",
                grads.input.data()[i]
            );
            worst = worst.max(err);
        }

        // Parameter gradients, one coordinate at a time.
        for layer_idx in 0..net.layers().len() {
            let Some(dense_grads) = grads.layers[layer_idx].clone() else {
                continue;
            };
            let n_weights = dense_grads.weights.len();
            let n_bias = dense_grads.bias.len();
            for p in 0..n_weights + n_bias {
                let analytic = if p < n_weights {
                    dense_grads.weights.data()[p]
                } else {
                    dense_grads.bias.data()[p - n_weights]
                };
                let nudge = |delta: f64, net: &mut Network<f64>| {
                    let Layer::Dense { weights, bias } = &mut net.layers_mut()[layer_idx] else {
                        unreachable!();
                    };
                    if p < n_weights {
                        weights.data_mut()[p] += delta;
                    } else {
                        bias.data_mut()[p - n_weights] += delta;
                    }
                };
                nudge(H, &mut net);
                let plus = loss(&net, &x, &direction);
                nudge(-2.0 * H, &mut net);
                let minus = loss(&net, &x, &direction);
                nudge(H, &mut net);
                let numeric = (plus - minus) / (2.0 * H);
                let err = rel_err(analytic, numeric);
                assert!(
                    err < MAX_REL_ERR,
                    "case {case}: layer {layer_idx} param {p}: analytic {analytic} numeric {numeric} err {err}"
                );
                worst = worst.max(err);
            }
        }
    }

    println!("worst relative error over 25 random nets: {worst:.3e}");
}

#[test]
fn f32_gradients_also_check_out_at_loose_tolerance() {
    // The generic core runs at f32 too; finite differences there need a
    // larger step and tolerance.
    let mut rng = StdRng::seed_from_u64(7);
    let net: Network<f32> = Network::mlp(3, &[4], 2, &mut rng).unwrap();
    let x: holmes_core::tensor::Tensor<f32> =
        holmes_core::tensor::Tensor::from_vec(vec![0.31, -0.44, 0.72]);
    let dir = vec![0.6f32, -0.9];

    let trace = net.forward(&x).unwrap();
    let grads = net
        .backward(&trace, &holmes_core::tensor::Tensor::from_vec(dir.clone()))
        .unwrap();

    let f = |x: &holmes_core::tensor::Tensor<f32>| -> f32 {
        let out = net.forward(x).unwrap();
        out.output()
            .data()
            .iter()
            .zip(&dir)
            .map(|(a, b)| a * b)
            .sum()
    };
    let h = 1e-2f32;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
        let analytic = grads.input.data()[i];
        assert!(
            (analytic - numeric).abs() < 1e-2,
            "{analytic} vs {numeric}"
        );
    }
    assert!(f32::as_f64(1.5f32) == 1.5);
}
