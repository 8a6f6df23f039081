use autodiff::{input_gradient, Backend, Eager, ParameterSet, Tape, Tensor, Unary};
use proptest::prelude::*;

const OPS: usize = 22;

/// A scalar test expression built from primitive `op` applied to the
/// parameters `x` (3×2) and `y` (shape depends on op), contracted with fixed
/// weights so every output entry matters.
fn expr<B: Backend>(b: &B, op: usize, p: &ParameterSet) -> B::T {
    let x = b.param("x", p.get("x").unwrap());
    let y = b.param("y", p.get("y").unwrap());
    let out = match op {
        0 => b.add(&x, &y),
        1 => b.sub(&x, &y),
        2 => b.mul(&x, &y),
        3 => {
            let den = b.add_scalar(&b.square(&y), 1.0);
            b.div(&x, &den)
        }
        4 => b.add_row(&x, &b.reshape(&b.col(&b.transpose(&y), 0), 1, 2)),
        5 => b.mul_col(&x, &b.col(&y, 1)),
        6 => b.matmul(&x, &b.transpose(&y)),
        7 => b.matmul_nt(&x, &y),
        8 => b.scale(&x, -1.7),
        9 => b.add_scalar(&b.mul(&x, &y), 0.3),
        10 => b.unary(&x, Unary::Softplus),
        11 => b.unary(&x, Unary::Tanh),
        12 => b.unary(&x, Unary::Sigmoid),
        13 => b.unary(&x, Unary::Exp),
        14 => b.unary(&x, Unary::Pow { p: 3.0, c: 0.5 }),
        15 => b.unary(&x, Unary::Elu),
        16 => b.sum_rows(&b.mul(&x, &y)),
        17 => b.sum_cols(&b.mul(&x, &y)),
        18 => b.hcat(&[y.clone(), x.clone(), b.col(&x, 1)]),
        19 => b.reshape(&b.mul(&x, &y), 2, 3),
        20 => b.unary(&b.mul(&x, &y), Unary::SmoothRelu(0.5)),
        21 => {
            let s = b.spectral_norm(&b.add(&x, &y), 500);
            b.square(&s)
        }
        _ => unreachable!(),
    };
    let (r, c) = b.dims(&out);
    let w = Tensor::new(vec![r, c], (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap();
    let weighted = b.mul(&out, &b.constant(w));
    b.sum_all(&weighted)
}

fn params(xs: &[f64], ys: &[f64]) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.insert("x", Tensor::new(vec![3, 2], xs.to_vec()).unwrap());
    p.insert("y", Tensor::new(vec![3, 2], ys.to_vec()).unwrap());
    p
}

fn fd_check(op: usize, p: &ParameterSet) -> Result<(), TestCaseError> {
    let tape = Tape::new();
    let out = expr(&tape, op, p);
    let g = tape.grad(out, p).unwrap();
    let h = 1e-5;
    for (name, t) in p.iter() {
        for k in 0..t.len() {
            let mut plus = p.clone();
            plus.get_mut(name).unwrap().data[k] += h;
            let mut minus = p.clone();
            minus.get_mut(name).unwrap().data[k] -= h;
            let fd = (Eager.scalar_value(&expr(&Eager, op, &plus))
                - Eager.scalar_value(&expr(&Eager, op, &minus)))
                / (2.0 * h);
            let an = g.get(name).unwrap().data[k];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-3);
            prop_assert!(rel < 1e-5, "op {} d{}[{}]: fd {} vs tape {}", op, name, k, fd, an);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn every_primitive_matches_finite_differences(
        op in 0..OPS,
        xs in prop::collection::vec(-2.0f64..2.0, 6),
        ys in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        // Keep away from the kinks of the piecewise rules.
        let xs: Vec<f64> = xs.iter().map(|v| if v.abs() < 1e-3 { v + 0.01 } else { *v }).collect();
        fd_check(op, &params(&xs, &ys))?;
    }
}

#[test]
fn sum_of_matrix_vector_product_has_all_ones_gradient() {
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let tape = Tape::new();
    let w = tape.param("w", p.get("w").unwrap());
    let x = tape.constant(Tensor::column(&[1.0, 1.0]));
    let out = tape.sum_all(&tape.matmul(&w, &x));
    let g = tape.grad(out, &p).unwrap();
    assert_eq!(g.get("w").unwrap().data, vec![1.0; 4]);
}

#[test]
fn squared_norm_gradient() {
    let mut p = ParameterSet::new();
    p.insert("x", Tensor::row(&[3.0, 4.0]));
    let tape = Tape::new();
    let x = tape.param("x", p.get("x").unwrap());
    let out = tape.sum_all(&tape.square(&x));
    assert_eq!(tape.grad(out, &p).unwrap().get("x").unwrap().data, vec![6.0, 8.0]);
}

#[test]
fn constant_expression_has_zero_gradients() {
    let mut p = ParameterSet::new();
    p.insert("a", Tensor::row(&[1.0, 2.0]));
    p.insert("b", Tensor::zeros(2, 2));
    let tape = Tape::new();
    let out = tape.scalar(5.0);
    let g = tape.grad(out, &p).unwrap();
    assert_eq!(g.len(), 2);
    assert!(g.iter().all(|(_, t)| t.data.iter().all(|v| *v == 0.0)));
    assert_eq!(g.get("b").unwrap().shape, vec![2, 2]);
}

#[test]
fn non_scalar_output_is_a_contract_error() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(autodiff::AdError::Contract(_))));
}

#[test]
fn nan_in_backward_names_the_node() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let l = tape.unary(&x, Unary::Ln);
    let out = tape.scale(&tape.mul(&l, &l), 1.0);
    match tape.backward(out) {
        Err(autodiff::AdError::Numeric { op, .. }) => assert_eq!(op, "unary"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn repeated_param_reads_share_one_leaf() {
    let tape = Tape::new();
    let t = Tensor::scalar(2.0);
    let a = tape.param("p", &t);
    let b = tape.param("p", &t);
    assert_eq!(a, b);
    let mut p = ParameterSet::new();
    p.insert("p", t);
    let out = tape.mul(&a, &b);
    assert_eq!(tape.grad(out, &p).unwrap().get("p").unwrap().item(), 4.0);
}

/// `V(x) = sum(softplus(x W1ᵀ + b1) ⊙ w2) + eps‖x‖²` evaluated row-wise.
fn small_net<B: Backend>(b: &B, p: &ParameterSet, x: &B::T) -> B::T {
    let w1 = b.param("w1", p.get("w1").unwrap());
    let b1 = b.param("b1", p.get("b1").unwrap());
    let w2 = b.param("w2", p.get("w2").unwrap());
    let z = b.add_row(&b.matmul_nt(x, &w1), &b1);
    let h = b.unary(&z, Unary::Softplus);
    let o = b.matmul_nt(&h, &w2);
    let q = b.scale(&b.sum_cols(&b.square(x)), 1e-3);
    b.add(&o, &q)
}

fn net_params(seed: u64) -> ParameterSet {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut p = ParameterSet::new();
    p.insert("w1", Tensor::new(vec![5, 3], r(15)).unwrap());
    p.insert("b1", Tensor::new(vec![1, 5], r(5)).unwrap());
    p.insert("w2", Tensor::new(vec![1, 5], r(5)).unwrap());
    p
}

#[test]
fn input_gradient_matches_finite_differences() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let p = net_params(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let xt = Tensor::row(&x);
        let g = input_gradient(&Eager, &xt, |d, xd| small_net(d, &p, xd)).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut a = x.clone();
            a[j] += h;
            let mut c = x.clone();
            c[j] -= h;
            let fd = (small_net(&Eager, &p, &Tensor::row(&a)).item()
                - small_net(&Eager, &p, &Tensor::row(&c)).item())
                / (2.0 * h);
            let an = g.data[j];
            worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn input_gradient_of_linear_and_quadratic_maps() {
    let x = Tensor::row(&[1.0, 2.0]);
    let g = input_gradient(&Eager, &x, |d, xd| {
        let a = d.constant(Tensor::row(&[1.0, -1.0]));
        d.row_dot(xd, &a)
    })
    .unwrap();
    assert_eq!(g.data, vec![1.0, -1.0]);
    let g = input_gradient(&Eager, &x, |d, xd| d.scale(&d.sum_cols(&d.square(xd)), 1e-3)).unwrap();
    assert!((g.data[0] - 0.002).abs() < 1e-15 && (g.data[1] - 0.004).abs() < 1e-15);
}

#[test]
fn input_gradient_rejects_non_column_output() {
    let x = Tensor::row(&[1.0, 2.0]);
    assert!(input_gradient(&Eager, &x, |_, xd| xd.clone()).is_err());
}

/// `g(θ) = ∇ₓV_θ(x)·v` differentiated with respect to θ through the tape.
#[test]
fn nested_gradient_matches_finite_differences() {
    let x = Tensor::row(&[0.4, -1.1, 0.7]);
    let v = Tensor::column(&[0.3, 0.9, -0.5]);
    let g_of = |p: &ParameterSet| {
        let gx = input_gradient(&Eager, &x, |d, xd| small_net(d, p, xd)).unwrap();
        gx.matmul(&v).item()
    };
    for seed in 0..5 {
        let p = net_params(seed);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let gx = input_gradient(&tape, &xv, |d, xd| small_net(d, &p, xd)).unwrap();
        let out = tape.matmul(&gx, &tape.constant(v.clone()));
        let grads = tape.grad(out, &p).unwrap();
        let h = 1e-5;
        for (name, t) in p.iter() {
            for k in 0..t.len() {
                let mut a = p.clone();
                a.get_mut(name).unwrap().data[k] += h;
                let mut c = p.clone();
                c.get_mut(name).unwrap().data[k] -= h;
                let fd = (g_of(&a) - g_of(&c)) / (2.0 * h);
                let an = grads.get(name).unwrap().data[k];
                let rel = (fd - an).abs() / an.abs().max(1e-3);
                assert!(rel < 1e-4, "{name}[{k}] fd {fd} vs {an}");
            }
        }
    }
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let p = net_params(9);
    let run = || {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]]));
        let gx = input_gradient(&tape, &x, |d, xd| small_net(d, &p, xd)).unwrap();
        let out = tape.sum_all(&tape.square(&gx));
        tape.grad(out, &p).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn replay_reproduces_recorded_values_exactly() {
    let p = net_params(4);
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]]));
    let gx = input_gradient(&tape, &x, |d, xd| small_net(d, &p, xd)).unwrap();
    let w = tape.param("w1", p.get("w1").unwrap());
    let s = tape.spectral_norm(&w, 25);
    let out = tape.add(&tape.sum_all(&gx), &s);
    let replayed = tape.replay();
    assert_eq!(replayed.len(), tape.len());
    for (i, v) in replayed.iter().enumerate() {
        assert_eq!(v, &tape.value_of(tape.var_at(i)), "node {i}");
    }
    assert_eq!(replayed[out.index()], tape.value_of(out));
}

#[test]
fn spectral_norm_examples_and_invariances() {
    use rand::{Rng, SeedableRng};
    assert!((Eager.spectral_norm(&Tensor::identity(3), 25).item() - 1.0).abs() < 1e-15);
    assert!((Eager.spectral_norm(&Tensor::identity(2).scale(2.0), 25).item() - 2.0).abs() < 1e-15);
    assert!((Eager.spectral_norm(&Tensor::diag(&[2.0, 0.5]), 50).item() - 2.0).abs() < 1e-8);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let w = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let s = Eager.spectral_norm(&w, 500).item();
        let st = Eager.spectral_norm(&w.transpose(), 500).item();
        assert!((s - st).abs() < 1e-10, "{s} vs {st}");
        let c = rng.gen_range(-3.0..3.0);
        let sc = Eager.spectral_norm(&w.scale(c), 500).item();
        assert!((sc - c.abs() * s).abs() < 1e-10);
    }
}

#[test]
fn spectral_norm_of_zero_matrix_has_zero_gradient() {
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::zeros(2, 3));
    let tape = Tape::new();
    let w = tape.param("w", p.get("w").unwrap());
    let out = tape.spectral_norm(&w, 25);
    assert_eq!(tape.value_of(out).item(), 0.0);
    assert!(tape.grad(out, &p).unwrap().get("w").unwrap().data.iter().all(|v| *v == 0.0));
}
