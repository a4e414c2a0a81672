//! Central finite-difference checks for every differentiable op.

use misr4d_tensor::{BatchNormStats, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Builds the graph from `inputs`, reduces to a scalar via a fixed random
/// projection, and compares analytic with central-difference gradients.
fn check<F>(inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let shape = g.shape(out);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let proj = g.constant(random(shape, &mut rng));
        let prod = g.mul(out, proj).unwrap();
        let loss = g.mean(prod);
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).unwrap();
        let gs = vars
            .iter()
            .map(|v| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(*v)))
            })
            .collect();
        (value, gs)
    };
    let (_, analytic) = eval(&inputs);
    let h = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-5,
                "input {i} elem {j}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn conv3x3_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(
        vec![
            random([2, 2, 4, 5], &mut rng),
            random([3, 2, 3, 3], &mut rng),
            random([3, 1, 1, 1], &mut rng),
        ],
        |g, v| g.conv2d(v[0], v[1], Some(v[2])).unwrap(),
    );
}

#[test]
fn conv1x1() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check(
        vec![
            random([1, 3, 3, 3], &mut rng),
            random([2, 3, 1, 1], &mut rng),
        ],
        |g, v| g.conv2d(v[0], v[1], None).unwrap(),
    );
}

#[test]
fn batch_norm_batch_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(
        vec![
            random([2, 3, 3, 3], &mut rng),
            random([3, 1, 1, 1], &mut rng),
            random([3, 1, 1, 1], &mut rng),
        ],
        |g, v| {
            g.batch_norm(v[0], v[1], v[2], BatchNormStats::Batch)
                .unwrap()
        },
    );
}

#[test]
fn batch_norm_running_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mean = [0.1, -0.2];
    let var = [0.5, 2.0];
    check(
        vec![
            random([1, 2, 3, 3], &mut rng),
            random([2, 1, 1, 1], &mut rng),
            random([2, 1, 1, 1], &mut rng),
        ],
        move |g, v| {
            g.batch_norm(
                v[0],
                v[1],
                v[2],
                BatchNormStats::Running {
                    mean: &mean,
                    var: &var,
                },
            )
            .unwrap()
        },
    );
}

#[test]
fn pointwise_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(vec![random([1, 2, 3, 3], &mut rng)], |g, v| g.relu(v[0]));
    check(vec![random([1, 2, 3, 3], &mut rng)], |g, v| g.sigmoid(v[0]));
    check(vec![random([1, 2, 3, 3], &mut rng)], |g, v| g.abs(v[0]));
    check(
        vec![random([1, 2, 3, 3], &mut rng), Tensor::scalar(0.25)],
        |g, v| g.prelu(v[0], v[1]).unwrap(),
    );
}

#[test]
fn pooling_and_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check(vec![random([2, 2, 4, 4], &mut rng)], |g, v| {
        g.max_pool2(v[0]).unwrap()
    });
    check(vec![random([1, 2, 5, 4], &mut rng)], |g, v| {
        g.avg_pool2(v[0]).unwrap()
    });
    check(vec![random([1, 2, 2, 3], &mut rng)], |g, v| {
        g.upsample2(v[0])
    });
    check(vec![random([1, 4, 2, 3], &mut rng)], |g, v| {
        g.depth_to_space(v[0], 2).unwrap()
    });
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    check(
        vec![
            random([1, 2, 3, 3], &mut rng),
            random([1, 1, 3, 3], &mut rng),
        ],
        |g, v| g.concat(&[v[0], v[1]]).unwrap(),
    );
    check(vec![random([2, 1, 3, 3], &mut rng)], |g, v| {
        g.repeat_channels(v[0], 3).unwrap()
    });
    check(
        vec![
            random([1, 3, 3, 3], &mut rng),
            random([1, 1, 3, 3], &mut rng),
        ],
        |g, v| g.mul_broadcast(v[0], v[1]).unwrap(),
    );
}

#[test]
fn arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random([1, 2, 2, 2], &mut rng);
    let b = random([1, 2, 2, 2], &mut rng).map(|v| v + 2.5);
    check(vec![a.clone(), b.clone()], |g, v| {
        g.add(v[0], v[1]).unwrap()
    });
    check(vec![a.clone(), b.clone()], |g, v| {
        g.sub(v[0], v[1]).unwrap()
    });
    check(vec![a.clone(), b.clone()], |g, v| {
        g.mul(v[0], v[1]).unwrap()
    });
    check(vec![a.clone(), b.clone()], |g, v| {
        g.div(v[0], v[1]).unwrap()
    });
    check(vec![a.clone()], |g, v| {
        let s = g.scale(v[0], -1.7);
        g.add_scalar(s, 0.3)
    });
    check(vec![b.clone()], |g, v| g.powf(v[0], 0.37));
    check(vec![a.clone()], |g, v| g.square(v[0]));
    check(vec![a], |g, v| g.clamp_min(v[0], 0.05));
}

#[test]
fn reductions_and_filters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    check(vec![random([2, 2, 3, 3], &mut rng)], |g, v| g.mean(v[0]));
    check(vec![random([2, 2, 3, 3], &mut rng)], |g, v| {
        g.mean_spatial(v[0])
    });
    let kernel = [0.2, 0.5, 0.3];
    check(vec![random([1, 2, 5, 6], &mut rng)], move |g, v| {
        g.gaussian_valid(v[0], &kernel).unwrap()
    });
}

#[test]
fn shared_subexpression_accumulates() {
    // y = x * x + x reuses x three times
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    check(vec![random([1, 1, 3, 3], &mut rng)], |g, v| {
        let sq = g.mul(v[0], v[0]).unwrap();
        g.add(sq, v[0]).unwrap()
    });
}
