use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_array(shape: &[usize], seed: u64) -> DiffArray<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiffArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn arr(shape: &[usize], data: &[f64]) -> DiffArray<f64> {
    DiffArray::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn run(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> DiffArray<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.to_array(v)
}

/// Contracts `y` with a fixed random tensor so every output coordinate
/// contributes a distinct weight to the scalar.
fn contract(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = rand_array(tape.shape(y), seed);
    let rv = tape.leaf(&r);
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_fixtures() {
    let m = arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let eye = arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let out = run(|t| {
        let (a, b) = (t.leaf(&eye), t.leaf(&m));
        t.matmul(a, b)
    });
    assert_eq!(out.data(), m.data());
    let proj = arr(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
    let b = arr(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    let out = run(|t| {
        let (a, b) = (t.leaf(&proj), t.leaf(&b));
        t.matmul(a, b)
    });
    assert_eq!(out.data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (rand_array(&[3, 4], 1), rand_array(&[4, 2], 2));
    let out = run(|t| {
        let (x, y) = (t.leaf(&a), t.leaf(&b));
        t.matmul(x, y)
    });
    let mut want = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                want[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
        }
    }
    assert_close(out.data(), &want, 1e-12);
    let mut t = Tape::<f64>::new();
    let (x, y) = (t.leaf(&a), t.leaf(&a));
    assert!(matches!(t.matmul(x, y), Err(Error::Shape(_))));
}

fn conv2d_oracle(x: &DiffArray<f64>, k: &DiffArray<f64>, stride: usize, pad: usize, groups: usize) -> Vec<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cg, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let og = o / groups;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            let g = oc / og;
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..cg {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let (yi, xj) = (
                                    (i * stride + di) as isize - pad as isize,
                                    (j * stride + dj) as isize - pad as isize,
                                );
                                if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                    continue;
                                }
                                s += x.at(&[bi, g * cg + ci, yi as usize, xj as usize]) * k.at(&[oc, ci, di, dj]);
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    let _ = c;
    out
}

#[test]
fn conv2d_fixtures() {
    let x = rand_array(&[1, 1, 4, 4], 3);
    let one = arr(&[1, 1, 1, 1], &[1.0]);
    let out = run(|t| {
        let (a, k) = (t.leaf(&x), t.leaf(&one));
        t.conv2d(a, k, 1, 0, 1)
    });
    assert_eq!(out.data(), x.data());
    let ones = DiffArray::full(&[1, 1, 5, 5], 1.0);
    let box3 = DiffArray::full(&[1, 1, 3, 3], 1.0);
    let out = run(|t| {
        let (a, k) = (t.leaf(&ones), t.leaf(&box3));
        t.conv2d(a, k, 1, 0, 1)
    });
    assert_eq!(out.shape(), &[1, 1, 3, 3]);
    assert!(out.data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv2d_matches_sliding_window() {
    for (stride, pad, groups, c, o) in [(1, 1, 1, 3, 4), (2, 1, 1, 2, 3), (1, 1, 4, 4, 4), (2, 0, 2, 4, 2)] {
        let x = rand_array(&[2, c, 6, 5], 10 + stride as u64);
        let k = rand_array(&[o, c / groups, 3, 3], 20 + groups as u64);
        let out = run(|t| {
            let (a, kk) = (t.leaf(&x), t.leaf(&k));
            t.conv2d(a, kk, stride, pad, groups)
        });
        assert_close(out.data(), &conv2d_oracle(&x, &k, stride, pad, groups), 1e-12);
    }
    let mut t = Tape::<f64>::new();
    let x = t.leaf(&rand_array(&[1, 3, 4, 4], 0));
    let k = t.leaf(&rand_array(&[2, 1, 3, 3], 0));
    assert!(t.conv2d(x, k, 1, 1, 2).is_err(), "3 channels are not divisible by 2 groups");
    let big = t.leaf(&rand_array(&[1, 3, 7, 7], 0));
    assert!(t.conv2d(x, big, 1, 1, 1).is_err(), "kernel larger than padded input");
}

#[test]
fn conv1d_causal_fixtures_and_oracle() {
    let x = rand_array(&[2, 3, 7], 4);
    for taps in [vec![1.0], vec![0.0, 1.0]] {
        let kw = taps.len();
        let k = DiffArray::from_fn(&[3, kw], |i| taps[i % kw]);
        let out = run(|t| {
            let (a, kk) = (t.leaf(&x), t.leaf(&k));
            t.conv1d_causal(a, kk)
        });
        assert_eq!(out.data(), x.data());
    }
    let k = rand_array(&[3, 4], 5);
    let out = run(|t| {
        let (a, kk) = (t.leaf(&x), t.leaf(&k));
        t.conv1d_causal(a, kk)
    });
    let mut want = vec![0.0; x.len()];
    for b in 0..2 {
        for d in 0..3 {
            for tt in 0..7 {
                let mut s = 0.0;
                for j in 0..4 {
                    let src = tt as isize - 3 + j as isize;
                    if src >= 0 {
                        s += k.at(&[d, j]) * x.at(&[b, d, src as usize]);
                    }
                }
                want[(b * 3 + d) * 7 + tt] = s;
            }
        }
    }
    assert_close(out.data(), &want, 1e-12);
}

#[test]
fn causal_conv_ignores_the_future() {
    let k = rand_array(&[1, 3], 6);
    let mut x = rand_array(&[1, 1, 8], 7);
    let before = run(|t| {
        let (a, kk) = (t.leaf(&x), t.leaf(&k));
        t.conv1d_causal(a, kk)
    });
    x.data_mut()[5] += 10.0;
    let after = run(|t| {
        let (a, kk) = (t.leaf(&x), t.leaf(&k));
        t.conv1d_causal(a, kk)
    });
    assert_eq!(before.data()[..5], after.data()[..5]);
    assert_ne!(before.data()[5], after.data()[5]);
}

#[test]
fn elementwise_fixtures() {
    let out = run(|t| {
        let z = t.constant(vec![1], vec![0.0])?;
        let s = t.sigmoid(z);
        let l = t.silu(z);
        t.add(s, l)
    });
    assert_eq!(out.data(), &[0.5]);
    let xs = [-10.0, 0.0, 10.0];
    let out = run(|t| {
        let x = t.constant(vec![3], xs.to_vec())?;
        Ok(t.softplus(x))
    });
    for (&x, &y) in xs.iter().zip(out.data()) {
        assert!((y - x.exp().ln_1p()).abs() < 1e-12);
    }
    // f32 path agrees with the f64 reference
    let mut t32 = Tape::<f32>::new();
    let x = t32.constant(vec![3], vec![-10.0, 0.0, 10.0]).unwrap();
    let y = t32.softplus(x);
    for (&x, &y) in xs.iter().zip(t32.value(y)) {
        assert!((y as f64 - x.exp().ln_1p()).abs() < 1e-6);
    }
}

#[test]
fn broadcasting_is_size_one_expansion_only() {
    let x = rand_array(&[2, 3, 4], 8);
    let b = rand_array(&[3, 1], 9);
    let out = run(|t| {
        let (a, c) = (t.leaf(&x), t.leaf(&b));
        t.mul(a, c)
    });
    for i in 0..2 {
        for j in 0..3 {
            for k in 0..4 {
                assert_eq!(out.at(&[i, j, k]), x.at(&[i, j, k]) * b.at(&[j, 0]));
            }
        }
    }
    let mut t = Tape::<f64>::new();
    let (a, c) = (t.leaf(&x), t.leaf(&rand_array(&[2, 4], 0)));
    assert!(matches!(t.add(a, c), Err(Error::Shape(_))));
}

#[test]
fn mean_fixtures_and_two_pass_oracle() {
    let out = run(|t| {
        let x = t.constant(vec![2], vec![2.0, 4.0])?;
        t.mean(x, &[0])
    });
    assert_eq!(out.data(), &[3.0]);
    let x = rand_array(&[4, 1, 5], 11);
    let out = run(|t| {
        let v = t.leaf(&x);
        t.mean(v, &[1])
    });
    assert_eq!(out.data(), x.data());
    let x = rand_array(&[4, 5], 12);
    for axis in [0, 1] {
        let out = run(|t| {
            let v = t.leaf(&x);
            t.mean(v, &[axis])
        });
        let (outer, inner) = if axis == 0 { (5, 4) } else { (4, 5) };
        for o in 0..outer {
            let vals: Vec<f64> = (0..inner).map(|i| if axis == 0 { x.at(&[i, o]) } else { x.at(&[o, i]) }).collect();
            let m = vals.iter().sum::<f64>() / inner as f64;
            // second pass corrects the rounding of the first
            let m = m + vals.iter().map(|v| v - m).sum::<f64>() / inner as f64;
            assert!((out.data()[o] - m).abs() < 1e-12);
        }
    }
    let mut t = Tape::<f64>::new();
    let v = t.leaf(&x);
    assert!(t.mean(v, &[2]).is_err());
}

#[test]
fn shape_ops_round_trip() {
    let x = rand_array(&[2, 3, 4], 13);
    let out = run(|t| {
        let v = t.leaf(&x);
        let p = t.permute(v, &[2, 0, 1])?;
        let f = t.flip(p, 0)?;
        let f = t.flip(f, 0)?;
        t.permute(f, &[1, 2, 0])
    });
    assert_eq!(out, x);
    let out = run(|t| {
        let v = t.leaf(&x);
        t.slice(v, 2, 1, 2)
    });
    assert_eq!(out.shape(), &[2, 3, 2]);
    assert_eq!(out.at(&[1, 2, 0]), x.at(&[1, 2, 1]));
}

#[test]
fn grad_check_fixtures() {
    let x = rand_array(&[5], 14);
    let err = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-6).unwrap();
    assert!(err < 1e-9, "{err}");
    let x = arr(&[2], &[1.0, 2.0]);
    let sq = |t: &mut Tape<f64>, v: Var| {
        let s = t.square(v);
        Ok(t.sum(s))
    };
    assert!(grad_check(sq, &x, 1e-3).unwrap() < 1e-3);
    let mut t = Tape::new();
    let v = t.leaf(&x.clone().with_grad(true));
    let y = sq(&mut t, v).unwrap();
    assert_eq!(t.backward(y).unwrap().get(v).unwrap(), &[2.0, 4.0]);
    assert!(matches!(grad_check(|_, v| Ok(v), &x, 1e-3), Err(Error::Shape(_))));
    assert!(grad_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
}

#[test]
fn primitive_gradients_pass_grad_check() {
    type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>);
    let cases: Vec<Case> = vec![
        (
            "matmul",
            vec![3, 4],
            Box::new(|t, x| {
                let w = t.leaf(&rand_array(&[4, 2], 30));
                t.matmul(x, w)
            }),
        ),
        (
            "conv2d",
            vec![1, 2, 5, 5],
            Box::new(|t, x| {
                let k = t.leaf(&rand_array(&[3, 2, 3, 3], 31));
                t.conv2d(x, k, 2, 1, 1)
            }),
        ),
        (
            "depthwise",
            vec![1, 3, 4, 4],
            Box::new(|t, x| {
                let k = t.leaf(&rand_array(&[3, 1, 3, 3], 32));
                t.conv2d(x, k, 1, 1, 3)
            }),
        ),
        (
            "conv1d",
            vec![2, 2, 5],
            Box::new(|t, x| {
                let k = t.leaf(&rand_array(&[2, 3], 33));
                t.conv1d_causal(x, k)
            }),
        ),
        ("softplus", vec![6], Box::new(|t, x| Ok(t.softplus(x)))),
        ("silu", vec![6], Box::new(|t, x| Ok(t.silu(x)))),
        (
            "broadcast_mul",
            vec![2, 3],
            Box::new(|t, x| {
                let b = t.leaf(&rand_array(&[3], 34).with_grad(true));
                t.mul(x, b)
            }),
        ),
        ("mean", vec![3, 4], Box::new(|t, x| t.mean(x, &[0]))),
    ];
    for (name, shape, f) in cases {
        let x = rand_array(&shape, 40);
        let err = grad_check(
            |t, v| {
                let y = f(t, v)?;
                contract(t, y, 41)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x = rand_array(&[3, 4], 15);
    let grad_of = |which: u8| {
        let mut t = Tape::new();
        let v = t.leaf(&x.clone().with_grad(true));
        let f = t.silu(v);
        let f = contract(&mut t, f, 16).unwrap();
        let g = t.square(v);
        let g = contract(&mut t, g, 17).unwrap();
        let root = match which {
            0 => f,
            1 => g,
            _ => t.add(f, g).unwrap(),
        };
        t.backward(root).unwrap().take(v).unwrap()
    };
    let (gf, gg, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..x.len() {
        assert!((gs[i] - (gf[i] + gg[i])).abs() <= 1e-15 * gs[i].abs().max(1.0));
    }
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(&rand_array(&[2, 2], 18).with_grad(true));
    let b = t.leaf(&rand_array(&[2, 2], 19));
    let y = t.mul(a, b).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert!(g.get(a).is_some());
    assert!(g.get(b).is_none());
}

proptest! {
    #[test]
    fn forward_is_bitwise_deterministic(seed in 0u64..1000) {
        let x = rand_array(&[1, 2, 4, 4], seed).cast::<f32>();
        let k = rand_array(&[2, 2, 3, 3], seed + 1).cast::<f32>();
        let eval = || {
            let mut t = Tape::<f32>::new();
            let (a, kk) = (t.leaf(&x), t.leaf(&k));
            let y = t.conv2d(a, kk, 1, 1, 1).unwrap();
            let y = t.silu(y);
            let m = t.mean(y, &[2, 3]).unwrap();
            t.value(m).to_vec()
        };
        let (a, b) = (eval(), eval());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn reshape_preserves_data(rows in 1usize..6, cols in 1usize..6, seed in 0u64..100) {
        let x = rand_array(&[rows, cols], seed);
        let out = run(|t| { let v = t.leaf(&x); t.reshape(v, vec![cols * rows]) });
        prop_assert_eq!(out.data(), x.data());
    }
}
