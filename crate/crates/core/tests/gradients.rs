use guide_core::attacks::loss_gradient;
use guide_core::metrics::Predictor;
use guide_core::nn::{cross_entropy, grad_input, grad_params, Activation, Conv2d, Dense, Pool2d};
use guide_core::{Layer, Model, Parameterized, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const REL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn dense(rng: &mut ChaCha8Rng, i: usize, o: usize) -> Layer {
    let s = 1.0 / (i as f64).sqrt();
    Layer::Dense(Dense::new(rand_tensor(rng, &[i, o], s), rand_tensor(rng, &[o], 0.1)).unwrap())
}

/// Small models covering every layer kind.
fn zoo(seed: u64) -> Vec<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = |rng: &mut ChaCha8Rng, k, i, o, pad| {
        Layer::Conv2d(Conv2d::new(rand_tensor(rng, &[k, k, i, o], 0.4), rand_tensor(rng, &[o], 0.1), 1, pad).unwrap())
    };
    let pool = Pool2d { size: 2, stride: 2 };
    vec![
        Model::new(vec![6], vec![dense(&mut rng, 6, 5), Layer::Activation(Activation::Tanh), dense(&mut rng, 5, 3)]).unwrap(),
        Model::new(vec![6], vec![dense(&mut rng, 6, 7), Layer::Activation(Activation::Relu), dense(&mut rng, 7, 4)]).unwrap(),
        Model::new(
            vec![6, 6, 2],
            vec![
                conv(&mut rng, 3, 2, 3, 1),
                Layer::Activation(Activation::Tanh),
                Layer::AvgPool2d(pool),
                Layer::Flatten,
                dense(&mut rng, 27, 3),
            ],
        )
        .unwrap(),
        Model::new(
            vec![7, 7, 1],
            vec![
                conv(&mut rng, 2, 1, 2, 0),
                Layer::MaxPool2d(pool),
                Layer::Activation(Activation::Relu),
                Layer::Flatten,
                dense(&mut rng, 18, 4),
                Layer::Activation(Activation::Softmax),
            ],
        )
        .unwrap(),
    ]
}

fn inputs(model: &Model, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(model.input_shape());
    rand_tensor(&mut rng, &shape, 1.0)
}

fn labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i % k).collect()
}

fn loss(model: &Model, x: &Tensor, y: &[usize]) -> f64 {
    cross_entropy(&model.forward(x, false).unwrap().logits, y).unwrap().0
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL * analytic.abs().max(numeric.abs()) + 1e-8
}

#[test]
fn parameter_gradients_match_central_differences() {
    for (m, model) in zoo(1).into_iter().enumerate() {
        let x = inputs(&model, 3, 10 + m as u64);
        let y = labels(3, model.num_classes());
        let grads = grad_params(&model, &x, &|logits: &Tensor| cross_entropy(logits, &y)).unwrap();
        assert_eq!(grads.len(), model.parameters().len());
        for (p, (name, g)) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = model.clone();
                plus.parameters_mut()[p].data_mut()[j] += STEP;
                let mut minus = model.clone();
                minus.parameters_mut()[p].data_mut()[j] -= STEP;
                let fd = (loss(&plus, &x, &y) - loss(&minus, &x, &y)) / (2.0 * STEP);
                assert!(close(g.data()[j], fd), "model {m} {name}[{j}]: {} vs {fd}", g.data()[j]);
            }
        }
    }
}

#[test]
fn input_gradients_match_central_differences() {
    for (m, model) in zoo(2).into_iter().enumerate() {
        let x = inputs(&model, 2, 20 + m as u64);
        let y = labels(2, model.num_classes());
        let g = grad_input(&model, &x, &|logits: &Tensor| cross_entropy(logits, &y)).unwrap();
        assert_eq!(g.shape(), x.shape());
        for j in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[j] += STEP;
            xm.data_mut()[j] -= STEP;
            let fd = (loss(&model, &xp, &y) - loss(&model, &xm, &y)) / (2.0 * STEP);
            assert!(close(g.data()[j], fd), "model {m} input[{j}]: {} vs {fd}", g.data()[j]);
        }
    }
}

#[test]
fn identity_layer_hand_example() {
    let w = Tensor::from_slice(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let model = Model::new(vec![2], vec![Layer::Dense(Dense::new(w, Tensor::zeros(&[2])).unwrap())]).unwrap();
    let x = Tensor::from_slice(&[1, 2], &[1.0, 0.0]).unwrap();
    let half_sq = |z: &Tensor| -> Result<(f64, Tensor)> { Ok((0.5 * z.data().iter().map(|v| v * v).sum::<f64>(), z.clone())) };
    let grads = grad_params(&model, &x, &half_sq).unwrap();
    assert_eq!(grads[0].0, "fc1.weight");
    assert_eq!(grads[0].1.data(), &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(grads[1].1.data(), &[1.0, 0.0]);
}

#[test]
fn frozen_models_have_no_parameter_gradients() {
    let mut model = zoo(3).remove(0);
    model.freeze();
    let x = inputs(&model, 2, 0);
    let y = labels(2, 3);
    assert!(grad_params(&model, &x, &|l: &Tensor| cross_entropy(l, &y)).unwrap().is_empty());
    assert!(model.layers_mut().is_err());
    // input gradients stay available for attacks
    let (_, g) = loss_gradient(Predictor::Base(&model), &x, &y).unwrap();
    assert!(g.max_abs() > 0.0);
}
