//! Test-only oracles. Nothing here calls the differentiation engine's
//! backward pass except to obtain the value being checked.

#![allow(dead_code)]

use localmim::{Tape, Tensor, Var};

/// Relative error with an absolute floor so that near-zero gradients are
/// compared on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_grads<G>(inputs: &[Tensor<f64>], h: f64, f: G) -> Vec<Vec<f64>>
where
    G: Fn(&[Tensor<f64>]) -> f64,
{
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            g.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Compares tape gradients of `build` against central differences; returns the
/// worst relative error.
pub fn gradcheck<B>(inputs: &[Tensor<f64>], build: B) -> f64
where
    B: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::no_grad();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&tape, &vars);
        let v = out.value().data()[0];
        v
    };
    let numeric = numeric_grads(inputs, 1e-6, eval);
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = build(&tape, &vars);
    loss.backward().unwrap();
    let mut worst: f64 = 0.0;
    for (v, num) in vars.iter().zip(&numeric) {
        let analytic = v
            .grad()
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![0.0; num.len()]);
        for (a, n) in analytic.iter().zip(num) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

/// Deterministic pseudo-random tensor for test inputs (xorshift, independent of
/// the library's generators).
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// 64×64 images in 16-pixel patches (4×4 grid) with narrow stacks; small
/// enough for end-to-end runs inside a unit test.
pub fn tiny_config() -> localmim::RunConfig {
    let text = "
        image_size = 64
        patch_size = 16
        enc_depth = 2
        enc_dim = 16
        enc_heads = 2
        mlp_ratio = 2
        dec_depth = 1
        dec_dim = 16
        dec_heads = 2
        window_plan = 2x2+3x1
        epochs = 3
        breakpoints = 1
        warmup_epochs = 1
        batch_size = 4
        pretrain_images = 8
        n_train = 8
        n_val = 4
        n_test = 4
        finetune_images = 8
        finetune_epochs = 2
        finetune_batch_size = 4
        fpn_dim = 8
        bench_grids = 9
        bench_window_plan = 3x2+5x1
        bench_trials = 3
    ";
    let cfg = localmim::RunConfig::parse(text).unwrap();
    cfg.validate().unwrap();
    cfg
}

/// Worst relative error between tape gradients of every trainable parameter
/// in `store` and central differences of `loss`.
pub fn store_gradcheck<L>(store: &mut localmim::ParamStore<f64>, h: f64, loss: L) -> f64
where
    L: for<'s> Fn(&'s localmim::Session<'_, f64>) -> Var<'s, f64>,
{
    let analytic = {
        let s = localmim::Session::new(store);
        let l = loss(&s);
        l.backward().unwrap();
        s.param_grads()
    };
    let value = |store: &localmim::ParamStore<f64>| {
        let s = localmim::Session::no_grad(store);
        let v = loss(&s).value().data()[0];
        v
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let g = analytic
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; store.get(id).tensor.numel()]);
        for (j, &analytic) in g.iter().enumerate() {
            let orig = store.get(id).tensor.data()[j];
            store.get_mut(id).tensor.data_mut()[j] = orig + h;
            let up = value(store);
            store.get_mut(id).tensor.data_mut()[j] = orig - h;
            let down = value(store);
            store.get_mut(id).tensor.data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * h)));
        }
    }
    worst
}
