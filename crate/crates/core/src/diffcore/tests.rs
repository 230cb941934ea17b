use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = t.constant(Tensor::eye(2));
    let c = t.matmul(a, i).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn logsumexp_large_magnitude() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let y = t.logsumexp(x, 0).unwrap();
    assert!((t.value(y).item() - (1000.0 + 2f64.ln())).abs() < 1e-9);
}

#[test]
fn mean_of_relu() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-1.0, 2.0, 3.0]));
    let r = t.relu(x);
    let m = t.mean(r);
    assert!((t.value(m).item() - 5.0 / 3.0).abs() < 1e-15);
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn gradient_of_matmul_sum() {
    let mut t = Tape::new();
    let a = t.param(Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 5.0]).unwrap());
    let b = t.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), &[1.0; 4]);
}

#[test]
fn tanh_slope_at_zero() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(0.0));
    let y = t.tanh(x);
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 1.0);
}

#[test]
fn unreachable_leaf_gets_zero() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = t.param(Tensor::vector(vec![7.0; 3]));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = t.constant(Tensor::zeros(&[3]));
    let err = t.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn log_domain_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(t.log(a), Err(Error::Domain { op: "log", .. })));
}

#[test]
fn grad_check_examples() {
    let sos = |t: &mut Tape, x: Var| {
        let s = t.square(x);
        Ok(t.sum(s))
    };
    let err = grad_check(sos, &Tensor::vector(vec![1.0, 2.0, 3.0]), 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");

    let constant = |t: &mut Tape, _x: Var| Ok(t.constant(Tensor::scalar(3.0)));
    let err = grad_check(constant, &Tensor::vector(vec![1.0, 2.0]), 1e-5).unwrap();
    assert_eq!(err, 0.0);

    assert!(grad_check(sos, &Tensor::vector(vec![1.0]), 1e-2).is_err());
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[5, 4]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let mut t = Tape::new();
    let va = t.param(a);
    let vb = t.param(b);
    let c = t.matmul(va, vb).unwrap();
    let c = t.tanh(c);
    let l = t.logsumexp(c, 1).unwrap();
    let s = t.mean(l);
    let g1 = t.backward(s).unwrap();
    let g2 = t.backward(s).unwrap();
    assert_eq!(g1.wrt(va).unwrap().data(), g2.wrt(va).unwrap().data());
    assert_eq!(g1.wrt(vb).unwrap().data(), g2.wrt(vb).unwrap().data());
}

type Probe = fn(&mut Tape, &[Var]) -> crate::Result<Var>;

/// One scalar-valued probe per primitive; the trailing weighted sum keeps
/// every output coordinate in play.
fn weighted(t: &mut Tape, y: Var) -> crate::Result<Var> {
    let n = t.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let w = t.constant(Tensor::new(t.shape(y).to_vec(), w)?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn probes() -> Vec<(&'static str, Vec<Vec<usize>>, Probe)> {
    vec![
        ("add", vec![vec![3, 2], vec![3, 2]], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted(t, y)
        }),
        ("sub", vec![vec![3, 2], vec![3, 2]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted(t, y)
        }),
        ("mul", vec![vec![3, 2], vec![3, 2]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y)
        }),
        ("scale", vec![vec![4]], |t, v| {
            let y = t.scale(v[0], -1.7);
            weighted(t, y)
        }),
        ("add_bias", vec![vec![3, 2], vec![2]], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            weighted(t, y)
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted(t, y)
        }),
        ("transpose", vec![vec![3, 4]], |t, v| {
            let y = t.transpose(v[0])?;
            weighted(t, y)
        }),
        ("reshape", vec![vec![3, 4]], |t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            weighted(t, y)
        }),
        ("concat", vec![vec![2, 3], vec![2, 1]], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            weighted(t, y)
        }),
        ("slice", vec![vec![2, 5, 2]], |t, v| {
            let y = t.slice(v[0], 1, 1, 3)?;
            weighted(t, y)
        }),
        ("gather", vec![vec![6]], |t, v| {
            let y = t.gather(v[0], vec![5, 0, 0, 3], &[2, 2])?;
            weighted(t, y)
        }),
        ("relu", vec![vec![6]], |t, v| {
            let y = t.relu(v[0]);
            weighted(t, y)
        }),
        ("tanh", vec![vec![6]], |t, v| {
            let y = t.tanh(v[0]);
            weighted(t, y)
        }),
        ("soft_clip", vec![vec![6]], |t, v| {
            let s = t.scale(v[0], 3.0);
            let y = t.soft_clip(s, 2.0);
            weighted(t, y)
        }),
        ("exp", vec![vec![6]], |t, v| {
            let y = t.exp(v[0]);
            weighted(t, y)
        }),
        ("log", vec![vec![6]], |t, v| {
            // shift into the positive domain
            let e = t.exp(v[0]);
            let y = t.log(e)?;
            let y = t.square(y);
            weighted(t, y)
        }),
        ("square", vec![vec![6]], |t, v| {
            let y = t.square(v[0]);
            weighted(t, y)
        }),
        ("mean", vec![vec![2, 3]], |t, v| {
            let s = t.square(v[0]);
            Ok(t.mean(s))
        }),
        ("sum_axis", vec![vec![2, 3, 2]], |t, v| {
            let y = t.sum_axis(v[0], 1)?;
            weighted(t, y)
        }),
        ("logsumexp", vec![vec![3, 4]], |t, v| {
            let y = t.logsumexp(v[0], 1)?;
            weighted(t, y)
        }),
        ("sym_inv_sqrt", vec![vec![3, 3]], |t, v| {
            // A Aᵀ + I keeps the input well inside the positive-definite cone
            let at = t.transpose(v[0])?;
            let g = t.matmul(v[0], at)?;
            let eye = t.constant(Tensor::eye(3));
            let spd = t.add(g, eye)?;
            let y = t.sym_inv_sqrt(spd, 1e-6)?;
            weighted(t, y)
        }),
        ("nuclear_norm", vec![vec![3, 2]], |t, v| t.nuclear_norm(v[0])),
    ]
}

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, shapes, f) in probes() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let err = grad_check_many(f, &pts, 1e-5, Coords::All).unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: rel err {err}");
        }
    }
}

proptest! {
    #[test]
    fn logsumexp_matches_naive_for_small_inputs(xs in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(xs.clone()));
        let y = t.logsumexp(x, 0).unwrap();
        prop_assert!((t.value(y).item() - naive).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_finite_for_huge_inputs(xs in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(xs));
        let y = t.logsumexp(x, 0).unwrap();
        prop_assert!(t.value(y).item().is_finite());
    }
}
