//! Central finite-difference checks for every layer kind.

use anodae_nn::{Grads, LayerSpec, Mode, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Loss = <r, y> + 0.5 * sum over taps of |t|^2, so both output and tap
/// gradients are exercised.
fn loss(net: &Network, x: &Tensor, proj: &[f64], mode: Mode) -> f64 {
    let (y, tape) = net.forward(x, mode).unwrap();
    let mut l: f64 = y.data().iter().zip(proj).map(|(a, b)| a * b).sum();
    for t in tape.taps() {
        l += 0.5 * t.data().iter().map(|v| v * v).sum::<f64>();
    }
    l
}

fn check(mut net: Network, batch: usize, mode: Mode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Larger weights than the 0.02 initializer so activations are not all tiny.
    for p in net.params_mut() {
        for v in p.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let mut shape = vec![batch];
    shape.extend(net.input_shape().iter().copied());
    let n: usize = shape.iter().product();
    let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
    let (y, tape) = net.forward(&x, mode).unwrap();
    let proj: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grad_out = Tensor::new(y.shape().to_vec(), proj.clone()).unwrap();
    let tap_grads: Vec<Tensor> = tape.taps().to_vec();
    let mut grads: Grads = net.zero_grads();
    let dx = net.backward(&tape, Some(&grad_out), &tap_grads, Some(&mut grads)).unwrap();

    let mut worst: f64 = 0.0;
    let params_len: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let flat = grads.flat().iter().map(|g| g.to_vec()).collect::<Vec<_>>();
    for (t, &len) in params_len.iter().enumerate() {
        for i in (0..len).step_by((len / 7).max(1)) {
            let orig = net.params()[t][i];
            net.params_mut()[t][i] = orig + STEP;
            let lp = loss(&net, &x, &proj, mode);
            net.params_mut()[t][i] = orig - STEP;
            let lm = loss(&net, &x, &proj, mode);
            net.params_mut()[t][i] = orig;
            let fd = (lp - lm) / (2.0 * STEP);
            let e = rel_err(fd, flat[t][i]);
            assert!(e < REL_TOL, "param tensor {t} index {i}: fd {fd} vs analytic {}", flat[t][i]);
            worst = worst.max(e);
        }
    }
    for i in (0..x.len()).step_by((x.len() / 11).max(1)) {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        let fd = (loss(&net, &xp, &proj, mode) - loss(&net, &xm, &proj, mode)) / (2.0 * STEP);
        let e = rel_err(fd, dx.data()[i]);
        assert!(e < REL_TOL, "input index {i}: fd {fd} vs analytic {}", dx.data()[i]);
    }
    assert!(worst < REL_TOL);
}

fn net(specs: Vec<LayerSpec>, input: Vec<usize>, taps: Vec<usize>) -> Network {
    Network::new(specs, input, taps, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
}

#[test]
fn conv_stack_with_batch_norm_in_training_mode() {
    let n = net(
        vec![
            LayerSpec::conv(1, 3, 4, 2, 1),
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::conv(3, 4, 4, 2, 1).without_bias(),
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Reshape { shape: vec![16] },
            LayerSpec::linear(16, 2),
        ],
        vec![1, 16],
        vec![1, 4],
    );
    check(n, 3, Mode::Train, 1);
}

#[test]
fn batch_norm_eval_mode() {
    let n = net(
        vec![LayerSpec::conv(2, 3, 3, 1, 1), LayerSpec::BatchNorm { channels: 3 }, LayerSpec::Tanh],
        vec![2, 6],
        vec![],
    );
    check(n, 2, Mode::Eval, 2);
}

#[test]
fn transposed_stack_with_sigmoid() {
    let n = net(
        vec![
            LayerSpec::Reshape { shape: vec![2, 1] },
            LayerSpec::transposed(2, 4, 4, 1, 0).without_bias(),
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::transposed(4, 1, 4, 2, 1),
            LayerSpec::Sigmoid,
        ],
        vec![2],
        vec![],
    );
    check(n, 3, Mode::Train, 3);
}

#[test]
fn spectrally_normalized_layers() {
    let n = net(
        vec![
            LayerSpec::conv(1, 3, 4, 2, 1).spectral().unwrap(),
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::conv(3, 2, 4, 2, 1).spectral().unwrap(),
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Reshape { shape: vec![8] },
            LayerSpec::linear(8, 1).spectral().unwrap(),
            LayerSpec::Sigmoid,
        ],
        vec![1, 16],
        vec![1, 3],
    );
    check(n, 2, Mode::Train, 4);
}

#[test]
fn pooled_classifier_head() {
    let n = net(
        vec![
            LayerSpec::conv(1, 3, 5, 2, 2),
            LayerSpec::BatchNorm { channels: 3 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::linear(3, 1),
        ],
        vec![1, 12],
        vec![],
    );
    assert_eq!(n.output_shape(), &[1]);
    check(n, 3, Mode::Train, 5);
}

#[test]
fn tap_only_backward_skips_the_head() {
    let n = net(
        vec![LayerSpec::conv(1, 2, 3, 1, 1), LayerSpec::Relu, LayerSpec::Reshape { shape: vec![8] }, LayerSpec::linear(8, 1)],
        vec![1, 4],
        vec![1],
    );
    let x = Tensor::new(vec![1, 1, 4], vec![0.1, 0.5, 0.3, 0.9]).unwrap();
    let (_, tape) = n.forward(&x, Mode::Eval).unwrap();
    let mut grads = n.zero_grads();
    let tg = vec![Tensor::full(vec![1, 2, 4], 1.0)];
    n.backward(&tape, None, &tg, Some(&mut grads)).unwrap();
    // linear head received nothing
    assert!(grads.0[3].iter().flatten().all(|v| *v == 0.0));
    assert_eq!(n.feature_len(), 8);
}
