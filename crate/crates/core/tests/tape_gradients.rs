//! Central finite-difference checks for every differentiable tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflseg::tensor::{self, Tape, Tensor, Var};
use reflseg::Error;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-5;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Builds `f` over fresh leaves for `inputs` and returns the scalar output.
fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Compares reverse-mode gradients of `f` against central differences and
/// returns the largest relative error.
fn fd_check(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("leaf gradient");
        assert_eq!(analytic.shape(), input.shape());
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * EPS);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Reduces any value to a scalar with fixed random weights so every output element matters.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(random(&shape, -1.0, 1.0, &mut rng));
    let prod = tape.mul(v, w).unwrap();
    tape.sum(prod)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn flip_gradient_is_flipped_upstream() {
    let mut r = rng(1);
    let x = random(&[2, 3, 5], -1.0, 1.0, &mut r);
    let w = random(&[2, 3, 5], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.constant(w.clone());
    let f = tape.flip_h(xv).unwrap();
    let p = tape.mul(f, wv).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(xv).unwrap(), &tensor::flip_h(&w).unwrap());

    let err = fd_check(&[x], &|t, v| {
        let f = t.flip_h(v[0]).unwrap();
        weighted_sum(t, f, 2)
    });
    assert!(err < 1e-6, "flip rel err {err}");
}

#[test]
fn elementwise_ops() {
    let mut r = rng(2);
    let a = random(&[3, 4], -1.0, 1.0, &mut r);
    let b = random(&[3, 4], -1.0, 1.0, &mut r);
    let s = random(&[1], 0.2, 1.0, &mut r);
    let err = fd_check(&[a.clone(), b.clone(), s], &|t, v| {
        let x = t.add(v[0], v[1]).unwrap();
        let y = t.mul(x, v[1]).unwrap();
        let z = t.sub(y, v[0]).unwrap();
        let z = t.scale(z, -1.7);
        let z = t.add_const(z, 0.3);
        let z = t.scale_by(z, v[2]).unwrap();
        let z = t.sigmoid(z);
        let z = t.reshape(z, &[12]).unwrap();
        weighted_sum(t, z, 3)
    });
    assert!(err < TOL, "elementwise rel err {err}");
}

#[test]
fn relu_away_from_kink() {
    let mut r = rng(3);
    let mut x = random(&[4, 4], -1.0, 1.0, &mut r);
    x.data_mut().iter_mut().for_each(|v| *v += 0.05 * v.signum());
    let err = fd_check(&[x], &|t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 4)
    });
    assert!(err < TOL, "relu rel err {err}");
}

#[test]
fn conv2d_all_geometries() {
    let mut r = rng(4);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let x = random(&[2, 5, 6], -1.0, 1.0, &mut r);
        let w = random(&[3, 2, k, k], -1.0, 1.0, &mut r);
        let b = random(&[3], -1.0, 1.0, &mut r);
        let err = fd_check(&[x, w, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
            weighted_sum(t, y, 5)
        });
        assert!(err < TOL, "conv k={k} s={stride} rel err {err}");
    }
}

#[test]
fn pooling_and_broadcast() {
    let mut r = rng(5);
    let f = random(&[3, 4, 4], -1.0, 1.0, &mut r);
    let mask = Tensor::new(vec![4, 4], (0..16).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
    let err = fd_check(&[f], &|t, v| {
        let p = t.masked_avg_pool(v[0], &mask).unwrap();
        let b = t.broadcast(p, 2, 3).unwrap();
        weighted_sum(t, b, 6)
    });
    assert!(err < TOL, "pool rel err {err}");
}

#[test]
fn cosine_gradient() {
    let mut r = rng(6);
    let a = random(&[5], -1.0, 1.0, &mut r);
    let b = random(&[5], -1.0, 1.0, &mut r);
    let err = fd_check(&[a, b], &|t, v| {
        let c = t.cosine(v[0], v[1]).unwrap();
        t.scale(c, 2.5)
    });
    assert!(err < TOL, "cosine rel err {err}");
}

#[test]
fn softmax_bce_gradient() {
    let mut r = rng(7);
    let logits = random(&[2, 4, 4], -2.0, 2.0, &mut r);
    let gt = Tensor::new(vec![4, 4], (0..16).map(|_| r.random_range(0..2) as f64).collect()).unwrap();
    let err = fd_check(std::slice::from_ref(&logits), &|t, v| {
        let p = t.softmax2(v[0]).unwrap();
        t.bce(p, &gt).unwrap()
    });
    assert!(err < 1e-6, "softmax+bce rel err {err}");

    // Loop oracle for the loss value.
    let probs = tensor::softmax2(&logits).unwrap();
    let mut expect = 0.0;
    for p in 0..16 {
        let g = gt.data()[p];
        let e0 = logits.data()[p].exp();
        let e1 = logits.data()[16 + p].exp();
        let fg = e1 / (e0 + e1);
        expect -= g * fg.ln() + (1.0 - g) * (1.0 - fg).ln();
    }
    expect /= 16.0;
    assert!((tensor::bce(&probs, &gt).unwrap() - expect).abs() < 1e-12);

    let err = fd_check(&[random(&[3, 2, 2], -1.0, 1.0, &mut r)], &|t, v| {
        let p = t.channel_softmax(v[0]).unwrap();
        weighted_sum(t, p, 8)
    });
    assert!(err < TOL, "softmax rel err {err}");
}

#[test]
fn softmax_channels_sum_to_one() {
    let mut r = rng(17);
    for _ in 0..50 {
        let p = tensor::softmax2(&random(&[2, 3, 3], -30.0, 30.0, &mut r)).unwrap();
        for i in 0..9 {
            assert!((p.data()[i] + p.data()[9 + i] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_entropy_gradient() {
    let mut r = rng(8);
    let labels: Vec<usize> = (0..9).map(|_| r.random_range(0..4)).collect();
    let err = fd_check(&[random(&[4, 3, 3], -1.0, 1.0, &mut r)], &|t, v| {
        let p = t.channel_softmax(v[0]).unwrap();
        t.cross_entropy(p, &labels).unwrap()
    });
    assert!(err < TOL, "cross entropy rel err {err}");
}

#[test]
fn concat_and_channel_select() {
    let mut r = rng(9);
    let a = random(&[2, 3, 3], -1.0, 1.0, &mut r);
    let b = random(&[3, 3], -1.0, 1.0, &mut r);
    let err = fd_check(&[a, b], &|t, v| {
        let c = t.concat(&[v[0], v[1]]).unwrap();
        let ch = t.channel(c, 1).unwrap();
        let back = t.concat(&[c, ch]).unwrap();
        weighted_sum(t, back, 10)
    });
    assert!(err < TOL, "concat rel err {err}");
}

#[test]
fn min_max_and_max_reduce() {
    let mut r = rng(10);
    let x = random(&[4, 4], -1.0, 1.0, &mut r);
    let err = fd_check(std::slice::from_ref(&x), &|t, v| {
        let y = t.min_max_norm(v[0]);
        weighted_sum(t, y, 11)
    });
    assert!(err < TOL, "min-max rel err {err}");
    let err = fd_check(&[x], &|t, v| {
        let (m, _) = t.max_reduce(v[0]).unwrap();
        t.scale(m, 3.0)
    });
    assert!(err < TOL, "max rel err {err}");

    let mut tape = Tape::new();
    let tied = tape.param(Tensor::new(vec![4], vec![0.0, 2.0, 2.0, 1.0]).unwrap());
    let (m, idx) = tape.max_reduce(tied).unwrap();
    assert_eq!(idx, 1);
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(tied).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn suppress_gradient() {
    let mut r = rng(11);
    let logits = random(&[2, 3, 3], -1.0, 1.0, &mut r);
    let base = random(&[3, 3], 0.1, 0.9, &mut r);
    let theta = Tensor::scalar(0.6);
    let err = fd_check(&[logits, theta], &|t, v| {
        let p = t.softmax2(v[0]).unwrap();
        let s = t.suppress(p, &base, v[1]).unwrap();
        weighted_sum(t, s, 12)
    });
    assert!(err < TOL, "suppress rel err {err}");
}

#[test]
fn backward_contracts() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let g = tape.backward(x).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 1.0);
    assert!(matches!(tape.backward(x), Err(Error::TapeConsumed)));

    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
    let sq = tape.mul(x, x).unwrap();
    assert!(matches!(tape.backward(sq), Err(Error::NonScalarRoot(_))));
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
    let c = tape.constant(Tensor::from_vec(vec![1.0, 1.0, 1.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    assert!(g.get(c).is_none());
}
