#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use squant::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi]` with a random sign, so none lies near zero.
pub fn away_from_zero(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any node to a scalar through a fixed random projection and a
/// softmax cross-entropy, so every output element affects the loss.
pub fn scalar_head(g: &mut Graph, out: NodeId, seed: u64) -> NodeId {
    let n = g.value(out).numel();
    let flat = g.reshape(out, vec![1, n]).unwrap();
    let mut r = rng(seed ^ 0xfeed);
    let w = g.input(Tensor::randn(&[3, n], 1.0 / (n as f32).sqrt(), &mut r));
    let b = g.input(Tensor::zeros(&[3]));
    let logits = g.dense(flat, w, b).unwrap();
    g.softmax_xent(logits, &[1]).unwrap()
}

fn loss_of(params: &ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let l = build(&mut g, params);
    g.value(l).data()[0] as f64
}

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per checked
/// parameter, with central differences of step `eps`.
pub fn grad_check(
    params: &mut ParamStore,
    ids: &[ParamId],
    eps: f32,
    build: &dyn Fn(&mut Graph, &ParamStore) -> NodeId,
) -> Vec<(String, f64)> {
    params.zero_grads();
    let mut g = Graph::new();
    let l = build(&mut g, params);
    g.backward(l, params).unwrap();
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| params.get(id).grad().unwrap().to_vec())
        .collect();
    let mut out = Vec::new();
    for (&id, a) in ids.iter().zip(&analytic) {
        let n = params.get(id).numel();
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..n {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss_of(params, build);
            params.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss_of(params, build);
            params.get_mut(id).data_mut()[i] = orig;
            let h = (orig + eps) as f64 - (orig - eps) as f64;
            let numeric = (up - down) / h;
            diff += (a[i] as f64 - numeric).powi(2);
            na += (a[i] as f64).powi(2);
            nn += numeric.powi(2);
        }
        let denom = na.sqrt().max(nn.sqrt()).max(1e-12);
        out.push((params.name(id).to_string(), diff.sqrt() / denom));
    }
    out
}

pub fn assert_grads(errors: &[(String, f64)], tol: f64) {
    for (name, e) in errors {
        assert!(*e <= tol, "gradient of `{name}` off by relative {e:.3e}");
    }
}
