//! Finite-difference checks for every differentiable operation.

use pour_nn::{concat_cols, ForwardCtx, Graph, Lstm, AdditiveAttention, BatchNorm, ParamId, ParamStore, Parallelism, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

/// Compares analytic gradients of `loss` with central differences for every
/// parameter in `store`.
fn check<F>(store: &mut ParamStore, tol: f32, loss: F)
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Var<'g>,
{
    let g = Graph::new(Parallelism::Sequential);
    let l = loss(&g, store);
    let grads = g.backward(l);
    let ids: Vec<ParamId> = store.ids().collect();
    let h = 1e-2f32;
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let analytic = grads.get(store, id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = {
                let g = Graph::new(Parallelism::Sequential);
                loss(&g, store).item() as f64
            };
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = {
                let g = Graph::new(Parallelism::Sequential);
                loss(&g, store).item() as f64
            };
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = ((up - down) / (2.0 * h as f64)) as f32;
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
            assert!(err < tol, "{}[{i}]: analytic {a} numeric {numeric}", store.name(id));
        }
    }
}

/// Weighted sum with fixed random weights, so every output element matters.
fn weighted<'g>(g: &'g Graph, y: Var<'g>, seed: u64) -> Var<'g> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&y.shape(), &mut rng);
    y.mul(g.input(w)).sum()
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&[3, 4], &mut rng));
    let b = s.add("b", random(&[3, 4], &mut rng));
    check(&mut s, 2e-3, |g, s| {
        let (x, y) = (g.param(s, a), g.param(s, b));
        let z = x.mul(y).add(x.tanh()).sub(y.sigmoid().scale(0.5)).add(x.square()).add(y.add_scalar(-2.0).abs()).add_scalar(-1.5);
        weighted(g, z.leaky_relu(0.1).add(x.relu()), 7)
    });
}

#[test]
fn matmul_bias_softmax_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&[2, 3], &mut rng));
    let b = s.add("b", random(&[3, 5], &mut rng));
    let c = s.add("c", random(&[5], &mut rng));
    let d = s.add("d", random(&[2, 1], &mut rng));
    check(&mut s, 2e-3, |g, s| {
        let y = g.param(s, a).matmul(g.param(s, b)).add_bias(g.param(s, c));
        let left = y.slice_cols(0, 2).mul_col(g.param(s, d));
        let right = y.slice_cols(2, 3).softmax_rows();
        weighted(g, concat_cols(&[left, right]), 11)
    });
}

#[test]
fn cross_entropy_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParamStore::new();
    let a = s.add("logits", random(&[4, 3], &mut rng));
    check(&mut s, 2e-3, |g, s| {
        let x = g.param(s, a);
        x.cross_entropy(&[0, 2, 1, 2]).add(x.mean().scale(0.3))
    });
}

#[test]
fn conv_pool_upsample_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = ParamStore::new();
    let x = s.add("x", random(&[2, 2, 5, 5], &mut rng));
    let w = s.add("w", random(&[3, 2, 3, 3], &mut rng));
    let b = s.add("b", random(&[3], &mut rng));
    check(&mut s, 5e-3, |g, s| {
        let y = g.param(s, x).conv2d(g.param(s, w), 2, 1).add_channel_bias(g.param(s, b));
        let up = y.upsample2x();
        let pooled = up.global_avg_pool();
        let flat = y.reshape(&[2, 27]);
        weighted(g, pooled, 5).add(weighted(g, flat, 6))
    });
}

#[test]
fn batch_and_instance_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let x = s.add("x", random(&[3, 2, 2, 2], &mut rng));
    let bn = BatchNorm::new(&mut s, "bn", 2);
    s.get_mut(bn.gamma).data_mut().copy_from_slice(&[1.3, 0.7]);
    check(&mut s, 1e-2, |g, s| {
        let mut ctx = ForwardCtx::train();
        let y = bn.forward(g, s, g.param(s, x), &mut ctx);
        weighted(g, y, 9).add(weighted(g, g.param(s, x).instance_norm(), 10))
    });
    // eval mode uses the stored statistics
    s.get_mut(bn.running_mean).data_mut().copy_from_slice(&[0.1, -0.2]);
    s.get_mut(bn.running_var).data_mut().copy_from_slice(&[0.5, 2.0]);
    check(&mut s, 5e-3, |g, s| {
        let mut ctx = ForwardCtx::eval();
        weighted(g, bn.forward(g, s, g.param(s, x), &mut ctx), 12)
    });
}

#[test]
fn lstm_with_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = ParamStore::new();
    let lstm = Lstm::new(&mut s, "lstm", 3, 4, &mut rng);
    let attn = AdditiveAttention::new(&mut s, "attn", 4, 3, &mut rng);
    let xs: Vec<Tensor> = (0..3).map(|_| random(&[2, 3], &mut rng)).collect();
    check(&mut s, 5e-3, |g, s| {
        let inputs: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let hs = lstm.forward(g, s, &inputs);
        let (ctx, weights) = attn.forward(g, s, &hs);
        weighted(g, ctx, 13).add(weighted(g, weights, 14))
    });
}

#[test]
fn attention_weights_are_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    let attn = AdditiveAttention::new(&mut s, "attn", 4, 3, &mut rng);
    let g = Graph::default();
    let hs: Vec<Var> = (0..5).map(|_| g.input(random(&[3, 4], &mut rng))).collect();
    let (_, w) = attn.forward(&g, &s, &hs);
    let w = w.value();
    for r in 0..3 {
        let row = w.row(r);
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn conv_is_identical_across_parallelism() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = ParamStore::new();
    let x = s.add("x", random(&[4, 3, 6, 6], &mut rng));
    let w = s.add("w", random(&[5, 3, 3, 3], &mut rng));
    let run = |par: Parallelism| {
        let g = Graph::new(par);
        let y = g.param(&s, x).conv2d(g.param(&s, w), 1, 1);
        let l = weighted(&g, y, 3);
        let grads = g.backward(l);
        (y.value().data().to_vec(), grads.get(&s, w).unwrap().clone(), grads.get(&s, x).unwrap().clone())
    };
    let a = run(Parallelism::Sequential);
    let b = run(Parallelism::default());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}
