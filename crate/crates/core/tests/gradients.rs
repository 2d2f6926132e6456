use dropens_core::gradcheck::finite_difference_check;
use dropens_core::nn::softmax_cross_entropy;
use dropens_core::{Graph, Member, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const STEP: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `y` to a scalar via a fixed random weighting so every output coordinate matters.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &shape);
    let wv = g.constant(&shape, w.data().to_vec())?;
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn check<F>(name: &str, shape: &[usize], f: F)
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..5 {
        let x = random(&mut rng, shape);
        let err = finite_difference_check(|g, v| {
            let y = f(g, v)?;
            contract(g, y, trial)
        }, &x, STEP)
        .unwrap();
        assert!(err <= TOL, "{name}: relative error {err:e} on trial {trial}");
    }
}

#[test]
fn elementwise_ops() {
    check("add", &[3, 4], |g, x| {
        let c = g.constant(&[3, 4], (0..12).map(|i| i as f64 * 0.1).collect())?;
        g.add(x, c)
    });
    check("sub", &[3, 4], |g, x| {
        let c = g.constant(&[3, 4], vec![0.3; 12])?;
        let a = g.sub(x, c)?;
        g.sub(c, a)
    });
    check("mul_self", &[5], |g, x| g.mul(x, x));
    check("scale_shift", &[2, 3], |g, x| {
        let s = g.scale(x, -2.5)?;
        g.add_scalar(s, 0.75)
    });
    check("exp", &[6], |g, x| g.exp(x));
    check("square", &[6], |g, x| g.square(x));
    check("log", &[6], |g, x| {
        let e = g.exp(x)?;
        g.log(e)
    });
    check("log_clamped", &[6], |g, x| {
        let e = g.exp(x)?;
        g.log_clamped(e, 1e-12)
    });
    check("relu", &[4, 4], |g, x| g.relu(x));
    check("mask_mul", &[2, 3], |g, x| g.mask_mul(x, vec![2.0, 0.0, 2.0, 2.0, 0.0, 0.0]));
}

#[test]
fn reductions_and_layout() {
    check("sum", &[3, 5], |g, x| g.sum(x));
    check("mean", &[3, 5], |g, x| g.mean(x));
    check("sum_rows", &[3, 5], |g, x| g.sum_rows(x));
    check("mean_leading", &[4, 3, 2], |g, x| g.mean_leading(x));
    check("reshape", &[2, 6], |g, x| g.reshape(x, &[3, 4]));
    check("concat", &[2, 3], |g, x| {
        let y = g.scale(x, 3.0)?;
        g.concat(&[x, y, x])
    });
    check("tile", &[2, 3], |g, x| g.tile(x, 3));
    check("slice_rows", &[5, 2], |g, x| g.slice_rows(x, 1, 3));
    check("pick", &[3, 4], |g, x| g.pick(x, &[0, 3, 2]));
}

#[test]
fn linear_algebra_and_softmax() {
    check("matmul_left", &[3, 4], |g, x| {
        let w = g.constant(&[4, 2], (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect())?;
        g.matmul(x, w)
    });
    check("matmul_right", &[4, 2], |g, w| {
        let x = g.constant(&[3, 4], (0..12).map(|i| (i as f64).sin()).collect())?;
        g.matmul(x, w)
    });
    check("add_bias", &[3], |g, b| {
        let x = g.constant(&[2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.5])?;
        g.add_bias(x, b)
    });
    check("add_bias_channels", &[2, 2, 3, 3], |g, x| {
        let b = g.constant(&[2], vec![0.1, -0.2])?;
        g.add_bias(x, b)
    });
    check("log_softmax", &[3, 5], |g, x| g.log_softmax(x));
    check("cross_entropy", &[4, 3], |g, x| softmax_cross_entropy(g, x, &[0, 2, 1, 2]));
}

#[test]
fn convolution_and_pooling() {
    for pad in [0, 1] {
        check(&format!("conv_input_pad{pad}"), &[2, 2, 5, 5], move |g, x| {
            let k = g.constant(&[3, 2, 3, 3], (0..54).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect())?;
            g.conv2d(x, k, pad)
        });
        check(&format!("conv_kernel_pad{pad}"), &[3, 2, 3, 3], move |g, k| {
            let x = g.constant(&[2, 2, 5, 5], (0..100).map(|i| (i as f64 * 0.37).cos()).collect())?;
            g.conv2d(x, k, pad)
        });
    }
    check("maxpool", &[2, 2, 4, 6], |g, x| g.maxpool2x2(x));
}

#[test]
fn cross_entropy_through_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (arch, shape, classes) in [("scnn", vec![1, 8, 8], 4), ("mlp2", vec![3], 3)] {
        let mut member = Member::<f64>::new(arch, &shape, classes, 5).unwrap();
        let mut batch_shape = vec![3];
        batch_shape.extend(&shape);
        let mask = member.sample_mask(1, 3).unwrap();
        let x = Tensor::new(&batch_shape, (0..batch_shape.iter().product()).map(|_| rng.random::<f64>()).collect()).unwrap();
        let err = finite_difference_check(
            |g, v| {
                let params = member.bind(g, false)?;
                let logits = member.forward_bound(g, &params, v, Some(&mask))?;
                softmax_cross_entropy(g, logits, &[0, 1, 2])
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err <= 1e-5, "{arch}: relative error {err:e}");
    }
}
