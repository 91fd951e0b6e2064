use mobilex_tensor::gradcheck::{self, GradReport};
use mobilex_tensor::{Conv2dParams, Graph, NormMode, PadMode, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero so kinks (relu, abs) are never crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Reduces any tensor to a scalar with non-uniform weights, so every output
/// element contributes a distinct amount to the root.
fn weighted_sum(g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let n = g.value(x).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let w = g.constant(Tensor::from_vec(g.shape(x).clone(), w)?);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn assert_ok(name: &str, r: GradReport) {
    eprintln!("{name}: {:.2e} ({} checked)", r.max_rel_err, r.checked);
    assert!(
        r.max_rel_err < TOL,
        "{name}: max rel err {:.3e} at {:?} over {} components",
        r.max_rel_err,
        r.worst,
        r.checked
    );
    assert!(r.checked > 0);
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_binary() {
    let mut r = rng();
    let a = random(&mut r, &[2, 3, 4]);
    let b = random(&mut r, &[2, 3, 4]);
    let inputs = [a, b];
    for (name, op) in [
        ("add", Graph::add as fn(&mut Graph<f64>, Var, Var) -> Result<Var>),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
    ] {
        let rep = gradcheck::check(&inputs, 64, |g, v| {
            let y = op(g, v[0], v[1])?;
            weighted_sum(g, y)
        })
        .unwrap();
        assert_ok(name, rep);
    }
}

#[test]
fn sum_of_products_matches_other_factor() {
    let mut r = rng();
    let a = random(&mut r, &[5]);
    let b = random(&mut r, &[5]);
    let mut g = Graph::<f64>::new();
    let va = g.leaf(a.clone().requires_grad());
    let vb = g.constant(b.clone());
    let p = g.mul(va, vb).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(va).unwrap(), b.data());
    let rep = gradcheck::check(&[a, b], 16, |g, v| {
        let p = g.mul(v[0], v[1])?;
        g.sum(p)
    })
    .unwrap();
    assert_ok("sum(a*b)", rep);
}

#[test]
fn elementwise_unary() {
    let mut r = rng();
    let x = away_from_zero(&mut r, &[3, 5]);
    type Unary = fn(&mut Graph<f64>, Var) -> Result<Var>;
    let ops: [(&str, Unary); 7] = [
        ("relu", Graph::relu),
        ("abs", Graph::abs),
        ("square", Graph::square),
        ("add_scalar", |g, x| g.add_scalar(x, 0.3)),
        ("mul_scalar", |g, x| g.mul_scalar(x, -1.7)),
        ("berhu", |g, x| g.berhu(x, 0.5)),
        ("mean", |g, x| {
            let sq = g.square(x)?;
            g.mean(sq)
        }),
    ];
    for (name, op) in ops {
        let rep = gradcheck::check(std::slice::from_ref(&x), 64, |g, v| {
            let y = op(g, v[0])?;
            weighted_sum(g, y)
        })
        .unwrap();
        assert_ok(name, rep);
    }
}

#[test]
fn spatial_ops() {
    let mut r = rng();
    let x = random(&mut r, &[2, 2, 4, 5]);
    type Unary = fn(&mut Graph<f64>, Var) -> Result<Var>;
    let ops: [(&str, Unary); 6] = [
        ("diff_x", Graph::diff_x),
        ("diff_y", Graph::diff_y),
        ("pad_zero", |g, x| g.pad2d(x, (1, 2, 0, 3), PadMode::Zero)),
        ("pad_replicate", |g, x| g.pad2d(x, (2, 1, 3, 1), PadMode::Replicate)),
        ("crop", |g, x| g.crop2d(x, (1, 1), (2, 3))),
        ("upsample", |g, x| g.upsample_bilinear(x, 9, 11)),
    ];
    for (name, op) in ops {
        let rep = gradcheck::check(std::slice::from_ref(&x), 200, |g, v| {
            let y = op(g, v[0])?;
            weighted_sum(g, y)
        })
        .unwrap();
        assert_ok(name, rep);
    }
}

#[test]
fn conv2d_variants() {
    let mut r = rng();
    let cases = [
        (
            [1, 3, 5, 5],
            [4, 3, 3, 3],
            Conv2dParams {
                padding: 1,
                ..Default::default()
            },
        ),
        (
            [2, 2, 5, 4],
            [3, 2, 3, 3],
            Conv2dParams {
                stride: 2,
                padding: 1,
                ..Default::default()
            },
        ),
        (
            [1, 2, 5, 5],
            [2, 2, 3, 3],
            Conv2dParams {
                padding: 2,
                dilation: 2,
                ..Default::default()
            },
        ),
        (
            [2, 3, 4, 4],
            [3, 1, 3, 3],
            Conv2dParams {
                padding: 1,
                groups: 3,
                ..Default::default()
            },
        ),
        (
            [1, 4, 5, 5],
            [4, 1, 3, 3],
            Conv2dParams {
                stride: 2,
                padding: 3,
                dilation: 3,
                groups: 4,
            },
        ),
        (
            [2, 4, 3, 3],
            [2, 2, 1, 1],
            Conv2dParams {
                groups: 2,
                ..Default::default()
            },
        ),
    ];
    for (xs, ws, p) in cases {
        let x = random(&mut r, &xs);
        let w = random(&mut r, &ws);
        let rep = gradcheck::check(&[x, w], 200, |g, v| {
            let y = g.conv2d(v[0], v[1], p)?;
            weighted_sum(g, y)
        })
        .unwrap();
        assert_ok(&format!("conv2d {xs:?} {ws:?} {p:?}"), rep);
    }
}

#[test]
fn batch_norm_train_and_eval() {
    let mut r = rng();
    let x = random(&mut r, &[2, 3, 4, 4]);
    let gamma = random(&mut r, &[3]);
    let beta = random(&mut r, &[3]);
    let inputs = [x, gamma, beta];
    let train = NormMode::Train { eps: 1e-5 };
    let eval = NormMode::Eval {
        mean: vec![0.1, -0.2, 0.05],
        var: vec![0.8, 1.3, 0.6],
        eps: 1e-5,
    };
    for (name, mode) in [("train", train), ("eval", eval)] {
        let rep = gradcheck::check(&inputs, 200, |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], &mode)?;
            weighted_sum(g, y)
        })
        .unwrap();
        assert_ok(&format!("batch_norm {name}"), rep);
    }
}

#[test]
fn two_layer_composition() {
    let mut r = rng();
    let x = random(&mut r, &[2, 2, 5, 5]);
    let w1 = random(&mut r, &[3, 2, 3, 3]);
    let w2 = random(&mut r, &[1, 3, 3, 3]);
    let rep = gradcheck::check(&[x, w1, w2], 100, |g, v| {
        let p = Conv2dParams {
            padding: 1,
            ..Default::default()
        };
        let h = g.conv2d(v[0], v[1], p)?;
        let h = g.square(h)?;
        let y = g.conv2d(h, v[2], p)?;
        let y = g.upsample_bilinear(y, 7, 8)?;
        weighted_sum(g, y)
    })
    .unwrap();
    assert_ok("two-layer", rep);
}
