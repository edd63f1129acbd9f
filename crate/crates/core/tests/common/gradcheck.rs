//! Central finite differences (h = 1e-4, f64) against reverse-mode gradients.

use adaptorx_core::model::{ModelConfig, ModelParams, Transformer};
use adaptorx_core::tensor::{Graph, ParamStore, Parameter, Tensor, Var, IGNORE_INDEX};
use adaptorx_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error, falling back to absolute error when both sides vanish.
fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

/// Max relative error over `coords` (all coordinates when `None`).
pub fn check_store<F>(mut store: ParamStore<f64>, coords: Option<Vec<(usize, usize)>>, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let loss = f(&mut g, store).unwrap();
        (g, loss)
    };
    let (g, loss) = eval(&store);
    g.backward(loss, &mut store).unwrap();
    let grads: Vec<Vec<f64>> = store.iter().map(|p| p.tensor.grad().unwrap().to_vec()).collect();
    let coords = coords.unwrap_or_else(|| {
        store
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.tensor.numel()).map(move |k| (i, k)))
            .collect()
    });
    let mut worst = 0.0f64;
    for (i, k) in coords {
        let orig = store.get(i).tensor.data()[k];
        store.get_mut(i).tensor.data_mut()[k] = orig + H;
        let (g, l) = eval(&store);
        let plus = g.value(l)[0];
        store.get_mut(i).tensor.data_mut()[k] = orig - H;
        let (g, l) = eval(&store);
        let minus = g.value(l)[0];
        store.get_mut(i).tensor.data_mut()[k] = orig;
        worst = worst.max(rel_err(grads[i][k], (plus - minus) / (2.0 * H)));
    }
    worst
}

/// `sum(y * w)` for a fixed random `w`, so every output element matters.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(&w);
    let yw = g.mul(y, w)?;
    g.sum(yw)
}

/// Leaves `p0..pn` on the graph and hands them to `f`.
pub fn check<F>(inputs: Vec<Tensor<f64>>, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::from_params(
        inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| Parameter::new(format!("p{i}"), t)),
    )
    .unwrap();
    check_store(store, None, |g, store| {
        let vars: Vec<Var> = (0..store.len()).map(|i| g.param(store, i)).collect();
        f(g, &vars)
    })
}

pub fn assert_ok(name: &str, err: f64) {
    eprintln!("{name}: max relative error {err:.2e}");
    assert!(err < TOL, "{name}: max relative error {err:e}");
}


/// Max relative error per primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |s: &[usize]| random(s, &mut rng);

    let err = check(vec![r(&[3, 4]), r(&[4, 2])], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 1)
    });
    out.push(("matmul", err));

    let err = check(vec![r(&[2, 3, 4]), r(&[2, 4, 5])], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 2)
    });
    out.push(("batched matmul", err));

    let err = check(vec![r(&[2, 3, 4]), r(&[4, 5])], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 3)
    });
    out.push(("broadcast matmul", err));

    let err = check(vec![r(&[2, 3, 4]), r(&[4])], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 4)
    });
    out.push(("add", err));

    let err = check(vec![r(&[3, 4]), r(&[3, 4])], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 5)
    });
    out.push(("mul", err));

    let err = check(vec![r(&[6, 4])], |g, v| {
        let y = g.embedding(v[0], &[0, 2, 2, 5], &[2, 2])?;
        project(g, y, 6)
    });
    out.push(("embedding_lookup", err));

    let err = check(vec![r(&[3, 5]), r(&[5]), r(&[5])], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        project(g, y, 7)
    });
    out.push(("layer_norm", err));

    let err = check(vec![r(&[3, 5])], |g, v| {
        let y = g.softmax(v[0])?;
        project(g, y, 8)
    });
    out.push(("softmax", err));

    let err = check(vec![r(&[3, 5])], |g, v| {
        let y = g.gelu(v[0])?;
        project(g, y, 9)
    });
    out.push(("gelu", err));

    let err = check(vec![r(&[2, 6])], |g, v| {
        let y = g.reshape(v[0], &[3, 4])?;
        project(g, y, 10)
    });
    out.push(("reshape", err));

    let err = check(vec![r(&[2, 3, 4])], |g, v| {
        let y = g.transpose(v[0], 1, 2)?;
        let y = g.transpose(y, 0, 1)?;
        project(g, y, 11)
    });
    out.push(("transpose", err));

    let err = check(vec![r(&[2, 3]), r(&[2, 2])], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        project(g, y, 12)
    });
    out.push(("concat", err));

    let err = check(vec![r(&[4, 5])], |g, v| {
        let y = g.slice(v[0], 1, 1, 4)?;
        project(g, y, 13)
    });
    out.push(("slice", err));

    let err = check(vec![r(&[3, 4])], |g, v| {
        let y = g.scale(v[0], 0.7)?;
        project(g, y, 14)
    });
    out.push(("scale", err));

    let err = check(vec![r(&[2, 3, 5])], |g, v| {
        g.cross_entropy(v[0], &[1, 4, IGNORE_INDEX, 0, 2, 3], IGNORE_INDEX)
    });
    out.push(("cross_entropy", err));
    out
}

/// Max relative error of the default-size model loss over 50 sampled
/// coordinates.
pub fn full_model_error() -> f64 {
    let vocab = 11;
    let model = Transformer::new(ModelConfig::new(vocab)).unwrap();
    let head = super::seq2seq_head(vocab);
    let (store, bindings) = super::build::<f64>(&model, &head, 3);
    let batch = super::seq2seq_batch(&[(vec![4, 5, 6, 7], vec![8, 9, 10]), (vec![6, 4], vec![5, 5, 7, 9])]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sizes: Vec<usize> = store.iter().map(|p| p.tensor.numel()).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<(usize, usize)> = (0..50)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut i = 0;
            while k >= sizes[i] {
                k -= sizes[i];
                i += 1;
            }
            (i, k)
        })
        .collect();
    let targets = batch.labels.flat().to_vec();
    check_store(store, Some(coords), |g, store| {
        let logits = model.forward(g, ModelParams::new(store, &bindings), &head, &batch, None)?;
        g.cross_entropy(logits, &targets, IGNORE_INDEX)
    })
}
