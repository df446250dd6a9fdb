use ppgen_nn::gradcheck::check;
use ppgen_nn::{CustomOp, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Weighted sum so every output element carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.input(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(x, w).unwrap();
    g.mean(p)
}

fn assert_ok(name: &str, cfg: usize, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let r = check(inputs, f, EPS, 1e-3);
    assert!(r.max_rel_err < TOL, "{name} config {cfg}: rel err {:.3e} abs {:.3e}", r.max_rel_err, r.max_abs_err);
}

#[test]
fn dense_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (cfg, (m, k, n)) in [(1, 1, 1), (2, 3, 4), (5, 4, 3), (7, 2, 6), (3, 8, 1)].into_iter().enumerate() {
        let x = rand_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[n], -1.0, 1.0);
        assert_ok("dense", cfg, &[x, w, b], |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2])).unwrap();
            weighted_sum(g, y, 10)
        });
    }
}

#[test]
fn conv1d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfgs = [
        (1, 1, 1, 5, 3, 1, 1),
        (2, 3, 2, 8, 3, 1, 1),
        (1, 2, 4, 9, 5, 4, 2),
        (3, 1, 2, 6, 1, 0, 1),
        (2, 2, 3, 12, 5, 2, 1),
    ];
    for (cfg, (bsz, cin, cout, len, k, pad, dil)) in cfgs.into_iter().enumerate() {
        let x = rand_tensor(&mut rng, &[bsz, cin, len], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[cout, cin, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[cout], -1.0, 1.0);
        assert_ok("conv1d", cfg, &[x, w, b], |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), pad, dil).unwrap();
            weighted_sum(g, y, 11)
        });
    }
}

#[test]
fn conv_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (cfg, (bsz, cin, cout, len, k, stride)) in
        [(1, 1, 1, 3, 2, 2), (2, 2, 3, 4, 2, 2), (1, 3, 2, 5, 3, 1), (2, 1, 1, 2, 4, 3), (1, 4, 2, 3, 2, 2)]
            .into_iter()
            .enumerate()
    {
        let x = rand_tensor(&mut rng, &[bsz, cin, len], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[cin, cout, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[cout], -1.0, 1.0);
        assert_ok("conv_transpose1d", cfg, &[x, w, b], |g, v| {
            let y = g.conv_transpose1d(v[0], v[1], Some(v[2]), stride).unwrap();
            weighted_sum(g, y, 12)
        });
    }
}

#[test]
fn pooling_and_reductions_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (cfg, (b, c, l)) in [(1, 1, 2), (2, 3, 8), (1, 2, 7), (3, 1, 4), (2, 2, 16)].into_iter().enumerate() {
        let x = rand_tensor(&mut rng, &[b, c, l], -1.0, 1.0);
        assert_ok("max_pool1d", cfg, std::slice::from_ref(&x), |g, v| {
            let y = g.max_pool1d(v[0]).unwrap();
            weighted_sum(g, y, 13)
        });
        assert_ok("mean_last", cfg, std::slice::from_ref(&x), |g, v| {
            let y = g.mean_last(v[0]);
            weighted_sum(g, y, 14)
        });
        assert_ok("expand_last", cfg, std::slice::from_ref(&x), |g, v| {
            let y = g.expand_last(v[0], 3);
            weighted_sum(g, y, 15)
        });
        assert_ok("smooth", cfg, std::slice::from_ref(&x), |g, v| {
            let y = g.gaussian_smooth(v[0], 1.3, 5).unwrap();
            weighted_sum(g, y, 16)
        });
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for cfg in 0..5 {
        let shape = [1 + cfg, 2 + cfg % 3];
        // keep relu/clamp arguments away from their kinks
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        let pos = rand_tensor(&mut rng, &shape, 0.2, 3.0);
        let y = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        type F = fn(&mut Graph, Var) -> Var;
        let unary: [(&str, F, &Tensor); 7] = [
            ("tanh", |g, v| g.tanh(v), &x),
            ("relu", |g, v| g.relu(v), &x),
            ("exp", |g, v| g.exp(v), &x),
            ("ln", |g, v| g.ln(v), &pos),
            ("normal_cdf", |g, v| g.normal_cdf(v), &x),
            ("scale", |g, v| g.scale(v, -1.7), &x),
            ("add_scalar", |g, v| g.add_scalar(v, 0.3), &x),
        ];
        for (name, op, input) in unary {
            assert_ok(name, cfg, std::slice::from_ref(input), |g, v| {
                let o = op(g, v[0]);
                weighted_sum(g, o, 17)
            });
        }
        assert_ok("clamp_min", cfg, std::slice::from_ref(&x), |g, v| {
            let o = g.clamp_min(v[0], 0.0);
            weighted_sum(g, o, 18)
        });
        type B = fn(&mut Graph, Var, Var) -> Var;
        let binary: [(&str, B); 4] = [
            ("add", |g, a, b| g.add(a, b).unwrap()),
            ("sub", |g, a, b| g.sub(a, b).unwrap()),
            ("mul", |g, a, b| g.mul(a, b).unwrap()),
            ("div", |g, a, b| g.div(a, b).unwrap()),
        ];
        for (name, op) in binary {
            assert_ok(name, cfg, &[y.clone(), pos.clone()], |g, v| {
                let o = op(g, v[0], v[1]);
                weighted_sum(g, o, 19)
            });
        }
        assert_ok("mse", cfg, &[x.clone(), y.clone()], |g, v| g.mse(v[0], v[1]).unwrap());
        assert_ok("mae", cfg, &[x.clone(), y.clone()], |g, v| g.mae(v[0], v[1]).unwrap());
    }
}

#[test]
fn broadcast_and_layout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for cfg in 0..5 {
        let (a, b, c) = (1 + cfg % 3, 2 + cfg % 2, 3 + cfg);
        let x = rand_tensor(&mut rng, &[a, b, c], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[b, c], -1.0, 1.0);
        assert_ok("add_bcast", cfg, &[x.clone(), y.clone()], |g, v| {
            let o = g.add_bcast(v[0], v[1]).unwrap();
            weighted_sum(g, o, 20)
        });
        assert_ok("mul_bcast", cfg, &[x.clone(), y.clone()], |g, v| {
            let o = g.mul_bcast(v[0], v[1]).unwrap();
            weighted_sum(g, o, 21)
        });
        assert_ok("permute", cfg, std::slice::from_ref(&x), |g, v| {
            let o = g.permute(v[0], &[2, 0, 1]).unwrap();
            weighted_sum(g, o, 22)
        });
        assert_ok("flatten", cfg, std::slice::from_ref(&x), |g, v| {
            let o = g.flatten(v[0], 1, 2).unwrap();
            weighted_sum(g, o, 23)
        });
        let z = rand_tensor(&mut rng, &[a, 1, c], -1.0, 1.0);
        assert_ok("concat", cfg, &[x.clone(), z], |g, v| {
            let o = g.concat(&[v[0], v[1]]).unwrap();
            weighted_sum(g, o, 24)
        });
        assert_ok("slice_axis1", cfg, std::slice::from_ref(&x), |g, v| {
            let o = g.slice_axis1(v[0], 1, b).unwrap();
            weighted_sum(g, o, 25)
        });
    }
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.input_grad(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    let s = g.mean(y);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0 / 3.0]);
}

#[test]
fn mae_subgradient_at_tie_is_zero() {
    let mut g = Graph::new();
    let a = g.input_grad(Tensor::new(&[2], vec![1.0, 3.0]));
    let b = g.input(Tensor::new(&[2], vec![1.0, 1.0]));
    let l = g.mae(a, b).unwrap();
    let grads = g.backward(l);
    assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.5]);
}

#[test]
fn identity_kernel_conv_is_identity() {
    let mut g = Graph::new();
    let x = Tensor::from_fn(&[2, 3, 7], |i| (i as f64).sin());
    let mut w = Tensor::zeros(&[3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[(c * 3 + c) * 3 + 1] = 1.0;
    }
    let xv = g.input(x.clone());
    let wv = g.input(w);
    let y = g.conv1d(xv, wv, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn concat_then_slice_roundtrips() {
    let mut g = Graph::new();
    let a = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
    let b = Tensor::from_fn(&[2, 2, 4], |i| -(i as f64));
    let av = g.input(a.clone());
    let bv = g.input(b.clone());
    let c = g.concat(&[av, bv]).unwrap();
    let a2 = g.slice_axis1(c, 0, 3).unwrap();
    let b2 = g.slice_axis1(c, 3, 5).unwrap();
    assert_eq!(g.value(a2), &a);
    assert_eq!(g.value(b2), &b);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 3]));
    let w = g.input(Tensor::zeros(&[4, 5]));
    let err = g.dense(x, w, None).unwrap_err().to_string();
    assert!(err.contains("dense"), "{err}");
    let y = g.input(Tensor::zeros(&[3, 2]));
    assert!(g.add(x, y).unwrap_err().to_string().contains("add"));
}

struct Square;

impl CustomOp for Square {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let d = inputs[0].data().iter().zip(grad_out.data()).map(|(x, g)| 2.0 * x * g).collect();
        vec![Some(Tensor::new(inputs[0].shape(), d))]
    }
}

#[test]
fn custom_op_participates_in_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for cfg in 0..5 {
        let x = rand_tensor(&mut rng, &[cfg + 1, 2], -2.0, 2.0);
        assert_ok("custom", cfg, &[x], |g, v| {
            let out = g.value(v[0]).map(|a| a * a);
            let y = g.custom(&[v[0]], out, Box::new(Square));
            weighted_sum(g, y, 26)
        });
    }
}

#[test]
fn shared_subexpression_accumulates() {
    let mut g = Graph::new();
    let x = g.input_grad(Tensor::new(&[1], vec![3.0]));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let s = g.mean(z);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
}
