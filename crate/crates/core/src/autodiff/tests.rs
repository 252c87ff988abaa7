use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const FD_STEP: f64 = 1e-5;

/// Central differences of a scalar function, independent of the reverse pass.
fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn m(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn relu_clips_negatives() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = m(3, 3, random_vec(&mut rng, 9, -2.0, 2.0));
    let mut t = Tape::new();
    let i = t.constant(Tensor::identity(3));
    let av = t.constant(a.clone());
    let out = t.matmul(i, av).unwrap();
    assert_eq!(t.value(out), &a);
}

#[test]
fn softmax_of_zero_and_ln3() {
    let mut t = Tape::new();
    let x = t.constant(m(1, 2, vec![0.0, 3f64.ln()]));
    let y = t.softmax_rows(x);
    let v = t.value(y).data();
    assert!((v[0] - 0.25).abs() < 1e-15);
    assert!((v[1] - 0.75).abs() < 1e-15);
}

#[test]
fn square_sum_gradient() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::new(vec![1], vec![3.0]).unwrap());
    let sq = t.square(x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);
}

#[test]
fn independent_leaf_gets_no_gradient() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let unused = t.variable(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());
    let loss = t.sum(x);
    t.backward(loss).unwrap();
    let g = t.grad(unused).map(|g| g.to_vec()).unwrap_or(vec![0.0; 2]);
    assert_eq!(g, vec![0.0, 0.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    let sq = t.square(x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0, -8.0]);
    t.zero_grads();
    assert!(t.grad(x).is_none());
}

#[test]
fn non_scalar_backward_is_rejected() {
    let mut t = Tape::new();
    let x = t.variable(m(2, 2, vec![1.0; 4]));
    assert!(t.backward(x).is_err());
}

#[test]
fn shape_mismatches_are_rejected() {
    let mut t = Tape::new();
    let a = t.constant(m(2, 3, vec![1.0; 6]));
    let b = t.constant(m(2, 3, vec![1.0; 6]));
    let c = t.constant(m(3, 2, vec![1.0; 6]));
    assert!(t.matmul(a, b).is_err());
    assert!(t.add(a, c).is_err());
    assert!(t.select_columns(a, &[3]).is_err());
    let short = t.constant(m(1, 3, vec![1.0; 3]));
    assert!(t.concat_columns(&[a, short]).is_err());
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
}

#[test]
fn log_of_zero_is_floored() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let y = t.log(x);
    assert_eq!(t.value(y).data()[0], LOG_FLOOR.ln());
    assert!(t.value(y).is_finite());
    let s = t.sum(y);
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap();
    assert_eq!(g, &[0.0, 1.0]);
}

#[test]
fn broadcasting_row_and_scalar() {
    let mut t = Tape::new();
    let a = t.variable(m(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    let row = t.variable(m(1, 2, vec![10.0, 20.0]));
    let s = t.variable(Tensor::scalar(2.0));
    let y = t.add(a, row).unwrap();
    assert_eq!(t.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
    let z = t.mul(y, s).unwrap();
    let loss = t.sum(z);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(row).unwrap(), &[4.0, 4.0]);
    assert_eq!(t.grad(s).unwrap(), &[70.0]);
    assert_eq!(t.grad(a).unwrap(), &[2.0; 4]);
}

/// Apply `build` to a fresh tape holding `x`, reduce with fixed weights and
/// return the tape's gradient together with the finite-difference one.
fn check_primitive(
    x: &[f64],
    shape: (usize, usize),
    weights: &[f64],
    build: impl Fn(&mut Tape, Var) -> Var,
) -> f64 {
    let eval = |vals: &[f64]| {
        let mut t = Tape::new();
        let xv = t.constant(m(shape.0, shape.1, vals.to_vec()));
        let y = build(&mut t, xv);
        let w = t.constant(
            Tensor::new(
                t.value(y).shape().to_vec(),
                weights[..t.value(y).len()].to_vec(),
            )
            .unwrap(),
        );
        let p = t.mul(y, w).unwrap();
        let s = t.sum(p);
        t.scalar(s).unwrap()
    };
    let mut t = Tape::new();
    let xv = t.variable(m(shape.0, shape.1, x.to_vec()));
    let y = build(&mut t, xv);
    let w = t.constant(
        Tensor::new(
            t.value(y).shape().to_vec(),
            weights[..t.value(y).len()].to_vec(),
        )
        .unwrap(),
    );
    let p = t.mul(y, w).unwrap();
    let s = t.sum(p);
    t.backward(s).unwrap();
    let analytic = t.grad(xv).unwrap().to_vec();
    max_rel_err(&analytic, &fd_gradient(eval, x))
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (r, c) = (3, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = random_vec(&mut rng, r * c, -2.0, 2.0);
        let pos: Vec<f64> = x.iter().map(|v| v.abs() + 0.1).collect();
        let w = random_vec(&mut rng, 64, -1.0, 1.0);
        let other = m(c, 2, random_vec(&mut rng, c * 2, -1.0, 1.0));
        let row = m(1, c, random_vec(&mut rng, c, -1.0, 1.0));
        let same = m(r, c, random_vec(&mut rng, r * c, -1.0, 1.0));
        // keep relu inputs off the kink
        let off_kink: Vec<f64> = x
            .iter()
            .map(|v| if v.abs() < 0.01 { v + 0.05 } else { *v })
            .collect();
        let checks: Vec<(Vec<f64>, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
            (
                x.clone(),
                Box::new(move |t, v| {
                    let o = t.constant(other.clone());
                    t.matmul(v, o).unwrap()
                }),
            ),
            (
                x.clone(),
                Box::new(move |t, v| {
                    let o = t.constant(row.clone());
                    t.add(v, o).unwrap()
                }),
            ),
            (
                x.clone(),
                Box::new({
                    let same = same.clone();
                    move |t, v| {
                        let o = t.constant(same.clone());
                        t.sub(v, o).unwrap()
                    }
                }),
            ),
            (
                x.clone(),
                Box::new(move |t, v| {
                    let o = t.constant(same.clone());
                    t.mul(v, o).unwrap()
                }),
            ),
            (off_kink, Box::new(|t, v| t.relu(v))),
            (pos, Box::new(|t, v| t.log(v))),
            (x.clone(), Box::new(|t, v| t.exp(v))),
            (
                x.clone(),
                Box::new(|t, v| {
                    let sq = t.square(v).unwrap();
                    t.sum(sq)
                }),
            ),
            (
                x.clone(),
                Box::new(|t, v| {
                    let sq = t.square(v).unwrap();
                    t.mean(sq)
                }),
            ),
            (x.clone(), Box::new(|t, v| t.scale(v, -1.7))),
            (
                x.clone(),
                Box::new(|t, v| t.select_columns(v, &[3, 0, 0]).unwrap()),
            ),
            (
                x.clone(),
                Box::new(|t, v| {
                    let a = t.slice_columns(v, 0, 2).unwrap();
                    let sq = t.square(v).unwrap();
                    t.concat_columns(&[sq, a]).unwrap()
                }),
            ),
            (x.clone(), Box::new(|t, v| t.softmax_rows(v))),
            (x.clone(), Box::new(|t, v| t.log_softmax_rows(v))),
        ];
        for (input, build) in checks {
            worst = worst.max(check_primitive(&input, (r, c), &w, build));
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

struct TwoLayer {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl TwoLayer {
    fn random(rng: &mut ChaCha8Rng, d: usize, h: usize, c: usize) -> Self {
        TwoLayer {
            w1: m(d, h, random_vec(rng, d * h, -1.0, 1.0)),
            b1: m(1, h, random_vec(rng, h, -0.5, 0.5)),
            w2: m(h, c, random_vec(rng, h * c, -1.0, 1.0)),
            b2: m(1, c, random_vec(rng, c, -0.5, 0.5)),
        }
    }

    fn forward(&self, t: &mut Tape, x: Var, vars: Option<&[Var]>) -> Result<Var> {
        let owned;
        let p = match vars {
            Some(v) => v,
            None => {
                owned = [
                    t.constant(self.w1.clone()),
                    t.constant(self.b1.clone()),
                    t.constant(self.w2.clone()),
                    t.constant(self.b2.clone()),
                ];
                &owned[..]
            }
        };
        let h = t.matmul(x, p[0])?;
        let h = t.add(h, p[1])?;
        let h = t.relu(h);
        let o = t.matmul(h, p[2])?;
        let o = t.add(o, p[3])?;
        Ok(t.log_softmax_rows(o))
    }
}

#[test]
fn mlp_loss_parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (d, h, c, n) = (4, 6, 3, 5);
        let net = TwoLayer::random(&mut rng, d, h, c);
        let x = m(n, d, random_vec(&mut rng, n * d, -1.0, 1.0));
        let onehot = {
            let mut o = vec![0.0; n * c];
            for i in 0..n {
                o[i * c + rng.gen_range(0..c)] = 1.0;
            }
            m(n, c, o)
        };
        let loss_of = |t: &mut Tape, vars: &[Var]| -> Var {
            let xv = t.constant(x.clone());
            let lp = net.forward(t, xv, Some(vars)).unwrap();
            let y = t.constant(onehot.clone());
            let picked = t.mul(lp, y).unwrap();
            let s = t.mean(picked);
            t.neg(s)
        };
        let mut t = Tape::new();
        let vars = [
            t.variable(net.w1.clone()),
            t.variable(net.b1.clone()),
            t.variable(net.w2.clone()),
            t.variable(net.b2.clone()),
        ];
        let loss = loss_of(&mut t, &vars);
        t.backward(loss).unwrap();
        let params = [&net.w1, &net.b1, &net.w2, &net.b2];
        for (k, p) in params.iter().enumerate() {
            let analytic = t.grad(vars[k]).unwrap().to_vec();
            let numeric = fd_gradient(
                |vals| {
                    let mut t = Tape::new();
                    let vars: Vec<Var> = params
                        .iter()
                        .enumerate()
                        .map(|(j, q)| {
                            if j == k {
                                t.constant(Tensor::new(q.shape().to_vec(), vals.to_vec()).unwrap())
                            } else {
                                t.constant((*q).clone())
                            }
                        })
                        .collect();
                    let l = loss_of(&mut t, &vars);
                    t.scalar(l).unwrap()
                },
                p.data(),
            );
            worst = worst.max(max_rel_err(&analytic, &numeric));
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn input_gradient_of_linear_model_is_weight() {
    let w = vec![0.5, -1.5, 2.0];
    let wt = m(3, 1, w.clone());
    let g = input_gradient(
        |t, x| {
            let wv = t.constant(wt.clone());
            t.matmul(x, wv)
        },
        &[0.3, 0.1, -0.7],
        0,
    )
    .unwrap();
    assert_eq!(g, w);
}

#[test]
fn input_gradient_of_constant_model_is_zero() {
    let g = input_gradient(
        |t, x| {
            let z = t.scale(x, 0.0);
            let c = t.constant(Tensor::scalar(4.0));
            let z = t.add(z, c)?;
            t.slice_columns(z, 0, 2)
        },
        &[1.0, 2.0, 3.0],
        1,
    )
    .unwrap();
    assert_eq!(g, vec![0.0; 3]);
}

#[test]
fn input_gradient_rejects_bad_class() {
    let r = input_gradient(|t, x| Ok(t.log_softmax_rows(x)), &[1.0, 2.0], 2);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn input_gradient_of_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let net = TwoLayer::random(&mut rng, 5, 8, 3);
        let x = random_vec(&mut rng, 5, -1.0, 1.0);
        let class = rng.gen_range(0..3);
        let analytic = input_gradient(|t, v| net.forward(t, v, None), &x, class).unwrap();
        let numeric = fd_gradient(
            |vals| {
                let mut t = Tape::new();
                let v = t.constant(m(1, 5, vals.to_vec()));
                let out = net.forward(&mut t, v, None).unwrap();
                t.value(out).data()[class]
            },
            &x,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let x = m(4, 7, random_vec(&mut rng, 28, -50.0, 50.0));
        let s = softmax_rows(&x);
        for i in 0..4 {
            let row = s.row(i);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn log_softmax_equals_log_of_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let x = m(3, 5, random_vec(&mut rng, 15, -50.0, 50.0));
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let ls = t.log_softmax_rows(xv);
        let s = t.softmax_rows(xv);
        for (a, p) in t.value(ls).data().iter().zip(t.value(s).data()) {
            // exact zero probabilities (underflow) are outside the comparison
            if *p > 0.0 {
                assert!((a - p.ln()).abs() <= 1e-9, "{a} vs {}", p.ln());
            }
        }
    }
}

#[test]
fn same_inputs_give_bit_identical_results() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let net = TwoLayer::random(&mut rng, 6, 10, 4);
        let x = m(8, 6, random_vec(&mut rng, 48, -1.0, 1.0));
        let mut t = Tape::new();
        let vars = [
            t.variable(net.w1.clone()),
            t.variable(net.b1.clone()),
            t.variable(net.w2.clone()),
            t.variable(net.b2.clone()),
        ];
        let xv = t.constant(x);
        let out = net.forward(&mut t, xv, Some(&vars)).unwrap();
        let l = t.sum(out);
        t.backward(l).unwrap();
        t.grad(vars[0]).unwrap().to_vec()
    };
    assert_eq!(run(), run());
}
