//! Central finite differences against the reverse sweep, op by op, in f64.

use gmmunit_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Builds a scalar from the inputs; the final reduction is a weighted sum so
/// every output element carries a distinct cotangent.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let n: usize = shape.iter().product();
        let weights = Tensor::from_vec(&shape, (0..n).map(|i| 0.3 + ((i * 7) % 5) as f64 * 0.17).collect());
        let weighted = tape.mul_const(out, weights);
        let root = tape.sum(weighted);
        let grads = tape.backward(root);
        let g = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (tape.value(root).item(), g)
    };
    let (_, analytic) = eval(&inputs);
    let eps = 1e-5;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let a = analytic[k].data()[i];
            assert!(
                (a - numeric).abs() <= 1e-5 * a.abs().max(numeric.abs()) + 1e-8,
                "input {k} elem {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let a = random(&[2, 3], &mut r);
    let b = random(&[2, 3], &mut r);
    check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check(vec![a.clone()], |t, v| t.scale(v[0], -1.7));
    check(vec![a.clone()], |t, v| t.offset(v[0], 2.5));
    check(vec![a.clone()], |t, v| t.abs(v[0]));
    check(vec![a.clone()], |t, v| t.exp(v[0]));
    check(vec![a.clone()], |t, v| t.relu(v[0]));
    check(vec![a.clone()], |t, v| t.leaky_relu(v[0], 0.2));
    check(vec![a.clone()], |t, v| t.tanh(v[0]));
    check(vec![a.clone()], |t, v| t.sigmoid(v[0]));
    check(vec![a.clone()], |t, v| t.softplus(v[0]));
    check(vec![a.clone()], |t, v| t.clamp(v[0], -0.5, 0.5));
    check(vec![a.clone()], |t, v| t.square(v[0]));
    check(vec![a.clone()], |t, v| t.mean(v[0]));
    check(vec![a.clone()], |t, v| t.sum(v[0]));
    check(vec![a.clone()], |t, v| t.sum_rows(v[0]));
    check(vec![a.clone()], |t, v| t.reshape(v[0], &[3, 2]));
    check(vec![a], |t, v| t.slice_cols(v[0], 1, 2));
}

#[test]
fn convolution_and_linear() {
    let mut r = rng();
    for &(k, stride, pad) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0), (5, 1, 2)] {
        let x = random(&[2, 2, 6, 6], &mut r);
        let w = random(&[3, 2, k, k], &mut r);
        let b = random(&[3], &mut r);
        check(vec![x, w, b], move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad));
    }
    let x = random(&[3, 4], &mut r);
    let w = random(&[5, 4], &mut r);
    let b = random(&[5], &mut r);
    check(vec![x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2])));
}

#[test]
fn normalization_and_modulation() {
    let mut r = rng();
    let x = random(&[2, 3, 4, 4], &mut r);
    check(vec![x.clone()], |t, v| t.instance_norm(v[0], 1e-5));
    check(vec![x.clone()], |t, v| t.layer_norm(v[0], 1e-5));
    let s = random(&[2, 3], &mut r);
    let sh = random(&[2, 3], &mut r);
    check(vec![x.clone(), s, sh], |t, v| t.modulate(v[0], v[1], v[2]));
    let g = random(&[3], &mut r);
    let b = random(&[3], &mut r);
    check(vec![x.clone(), g, b], |t, v| t.channel_affine(v[0], v[1], v[2]));
    check(vec![x.clone()], |t, v| t.global_avg_pool(v[0]));
    check(vec![x], |t, v| t.upsample2x(v[0]));
}

#[test]
fn structural_ops() {
    let mut r = rng();
    let m = random(&[2, 1, 3, 3], &mut r);
    check(vec![m], |t, v| t.broadcast_channels(v[0], 3));
    let a = random(&[2, 1, 2, 2], &mut r);
    let b = random(&[2, 2, 2, 2], &mut r);
    check(vec![a, b], |t, v| t.concat_channels(&[v[0], v[1]]));
    let logits = random(&[3, 4], &mut r);
    check(vec![logits], |t, v| t.cross_entropy(v[0], &[0, 3, 1]));
}

#[test]
fn shared_subexpressions_accumulate() {
    let mut r = rng();
    let a = random(&[4], &mut r);
    check(vec![a], |t, v| {
        let s = t.tanh(v[0]);
        let p = t.mul(s, v[0]);
        t.add(p, s)
    });
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::from_f64(&[2], &[1.0, 2.0]));
    let p = tape.param(Tensor::from_f64(&[2], &[3.0, 4.0]));
    let prod = tape.mul(c, p);
    let s = tape.sum(prod);
    let grads = tape.backward(s);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    let d = tape.detach(p);
    assert!(!tape.requires_grad(d));
}
