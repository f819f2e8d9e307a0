use delayed_rl::nn::{AdamConfig, AdamState, Gradients, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative error between the analytic gradient of `output · upstream`
/// and central differences.
fn gradient_check(net: &Mlp<f64>, input: &[f64], upstream: &[f64], h: f64) -> f64 {
    let analytic = net.backward(input, upstream).unwrap();
    let objective = |n: &Mlp<f64>| -> f64 { n.forward(input).unwrap().iter().zip(upstream).map(|(o, u)| o * u).sum() };
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for k in 0..net.num_params() {
        let original = probe.params()[k];
        probe.params_mut()[k] = original + h;
        let plus = objective(&probe);
        probe.params_mut()[k] = original - h;
        let minus = objective(&probe);
        probe.params_mut()[k] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let scale = analytic.0[k].abs().max(numeric.abs());
        if scale > 1e-7 {
            worst = worst.max((analytic.0[k] - numeric).abs() / scale);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_on_random_nets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.random_range(1..4);
        let mut sizes = vec![rng.random_range(1..6)];
        for _ in 0..depth {
            sizes.push(rng.random_range(1..8));
        }
        // Random biases keep hidden units off the ReLU kink at zero.
        let mut net = Mlp::<f64>::zeros(&sizes).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        let input: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst = worst.max(gradient_check(&net, &input, &upstream, 1e-5));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn batched_gradients_sum_single_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = Mlp::<f64>::new(&[3, 5, 2], &mut rng).unwrap();
    let inputs: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut batched = Gradients::zeros(net.num_params());
    net.accumulate_gradients(&inputs, &upstream, 4, &mut batched).unwrap();
    let mut summed = vec![0.0; net.num_params()];
    for b in 0..4 {
        let g = net.backward(&inputs[b * 3..(b + 1) * 3], &upstream[b * 2..(b + 1) * 2]).unwrap();
        for (acc, x) in summed.iter_mut().zip(g.0) {
            *acc += x;
        }
    }
    for (a, b) in batched.0.iter().zip(&summed) {
        assert!((a - b).abs() < 1e-12);
    }
    let batch_out = net.forward_batch(&inputs, 4).unwrap();
    for (a, b) in batch_out[2..4].iter().zip(net.forward(&inputs[3..6]).unwrap()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn two_hidden_layers_fit_a_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = [[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]];
    let data: Vec<([f64; 3], [f64; 2])> = (0..1000)
        .map(|_| {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let y = [0, 1].map(|j| (0..3).map(|i| x[i] * w[i][j]).sum::<f64>());
            (x, y)
        })
        .collect();
    let mut net = Mlp::<f64>::new(&[3, 64, 64, 2], &mut rng).unwrap();
    let mut adam = AdamState::new(net.num_params(), AdamConfig::default());
    let mse = |net: &Mlp<f64>| -> f64 {
        data.iter()
            .map(|(x, y)| net.forward(x).unwrap().iter().zip(y).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / 2.0)
            .sum::<f64>()
            / data.len() as f64
    };
    let batch = 64;
    for _ in 0..5000 {
        let mut inputs = Vec::with_capacity(batch * 3);
        let mut targets = Vec::with_capacity(batch * 2);
        for _ in 0..batch {
            let (x, y) = &data[rng.random_range(0..data.len())];
            inputs.extend_from_slice(x);
            targets.extend_from_slice(y);
        }
        let out = net.forward_batch(&inputs, batch).unwrap();
        let upstream: Vec<f64> = out.iter().zip(&targets).map(|(o, t)| (o - t) / (batch as f64)).collect();
        let mut grads = Gradients::zeros(net.num_params());
        net.accumulate_gradients(&inputs, &upstream, batch, &mut grads).unwrap();
        adam.step(net.params_mut(), &grads.0);
    }
    let loss = mse(&net);
    assert!(loss < 1e-3, "mse {loss}");
    assert!(net.all_finite() && adam.all_finite());
}
