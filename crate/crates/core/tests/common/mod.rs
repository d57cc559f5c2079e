use mftrain::mfmac::MacEngine;
use mftrain::nn::network::{mse, softmax_cross_entropy, LossOutput};
use mftrain::nn::{
    init_weights, InitKind, LayerSpec, LossKind, Network, NetworkSpec, PassContext, Precision, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_spec(rng: &mut ChaCha8Rng, i: usize) -> NetworkSpec {
    let mut spec = if i % 4 == 3 {
        NetworkSpec {
            input_shape: vec![2, 5, 5],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1 + rng.random_range(0..2),
                    padding: rng.random_range(0..2),
                    bits: None,
                    gamma: None,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    outputs: 3,
                    bits: None,
                    gamma: None,
                },
            ],
            ..NetworkSpec::mlp(&[1, 1])
        }
    } else {
        let depth = rng.random_range(1..=3);
        let sizes: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=7)).collect();
        NetworkSpec::mlp(&sizes)
    };
    if i % 2 == 1 {
        spec.loss = LossKind::Mse;
    }
    spec
}

fn loss(net: &Network, out: &Tensor, labels: &[usize], targets: &[f64]) -> LossOutput {
    match net.loss {
        LossKind::SoftmaxCrossEntropy => softmax_cross_entropy(out, labels).unwrap(),
        LossKind::Mse => mse(out, targets).unwrap(),
    }
}

fn eval(net: &mut Network, engine: &MacEngine, x: &Tensor, labels: &[usize], targets: &[f64]) -> f64 {
    let mut ctx = PassContext::new(engine, Precision::Full);
    let out = net.forward(x.clone(), &mut ctx).unwrap();
    net.clear_caches();
    loss(net, &out, labels, targets).loss
}

/// Worst norm-wise relative error between analytic and central-difference
/// gradients over `nets` random FP32 networks.
pub fn worst_gradient_error(nets: usize, seed: u64) -> f64 {
    let engine = MacEngine::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..nets {
        let spec = random_spec(&mut rng, i);
        let mut net = Network::from_spec(&spec).unwrap();
        init_weights(&mut net, InitKind::UntruncatedNormal, &mut rng);
        let batch = 3;
        let width: usize = spec.input_shape.iter().product();
        let mut shape = vec![batch];
        shape.extend(&spec.input_shape);
        let x = Tensor::new((0..batch * width).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap();
        let outputs = net.output_size();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..outputs)).collect();
        let targets: Vec<f64> = (0..batch * outputs).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut ctx = PassContext::new(&engine, Precision::Full);
        let out = net.forward(x.clone(), &mut ctx).unwrap();
        let l = loss(&net, &out, &labels, &targets);
        net.backward(l.grad, &mut ctx).unwrap();
        let analytic: Vec<f64> = net
            .params()
            .iter()
            .flat_map(|p| p.weight.grad.clone().unwrap())
            .collect();

        let h = 1e-6;
        let mut numeric = Vec::new();
        let layers = net.params().len();
        for li in 0..layers {
            for wi in 0..net.params()[li].weight.len() {
                let orig = net.params()[li].weight.data[wi];
                net.params_mut()[li].weight.data[wi] = orig + h;
                let up = eval(&mut net, &engine, &x, &labels, &targets);
                net.params_mut()[li].weight.data[wi] = orig - h;
                let down = eval(&mut net, &engine, &x, &labels, &targets);
                net.params_mut()[li].weight.data[wi] = orig;
                numeric.push((up - down) / (2.0 * h));
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(rel);
    }
    worst
}
