use ehrseq::numcore::gradcheck::{check, rel_error};
use ehrseq::numcore::{Graph, ParamSet, Tensor, Var};
use ehrseq::Result;
use proptest::prelude::*;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

/// Deterministic values in [-1, 1] kept away from zero so ReLU kinks are
/// not straddled by the finite difference.
fn values(n: usize, salt: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = ((i as u64 + 1) * 2654435761 + salt * 40503) % 1000;
            let v = x as f64 / 500.0 - 1.0;
            if v.abs() < 0.15 {
                v.signum() * 0.15 + v
            } else {
                v
            }
        })
        .collect()
}

fn param(ps: &mut ParamSet<f64>, name: &str, shape: &[usize], salt: u64) {
    let n = shape.iter().product();
    ps.add(name, Tensor::new(shape, values(n, salt)).unwrap());
}

fn run(ps: &mut ParamSet<f64>, f: impl FnMut(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>) {
    let report = check(ps, H, 20, f).unwrap();
    assert!(report.checked > 0);
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

fn p(g: &mut Graph<f64>, ps: &ParamSet<f64>, name: &str) -> Var {
    g.param(ps, ps.find(name).unwrap())
}

#[test]
fn dense_and_activations() {
    let mut ps = ParamSet::new();
    param(&mut ps, "x", &[3, 4], 1);
    param(&mut ps, "w", &[4, 5], 2);
    param(&mut ps, "b", &[5], 3);
    run(&mut ps, |g, ps| {
        let (x, w, b) = (p(g, ps, "x"), p(g, ps, "w"), p(g, ps, "b"));
        let h = g.matmul(x, w)?;
        let h = g.add_bias(h, b)?;
        let a = g.tanh(h);
        let s = g.sigmoid(h);
        let r = g.relu(x);
        let r = g.sum(r);
        let ge = g.gelu(h);
        let m = g.mul(a, s)?;
        let m = g.sub(m, ge)?;
        let m = g.scale(m, 1.7);
        let total = g.mean(m);
        g.add(total, r)
    });
}

#[test]
fn softmax_layer_norm_and_slicing() {
    let mut ps = ParamSet::new();
    param(&mut ps, "x", &[4, 6], 4);
    param(&mut ps, "gamma", &[6], 5);
    param(&mut ps, "beta", &[6], 6);
    param(&mut ps, "t", &[4, 6], 7);
    run(&mut ps, |g, ps| {
        let (x, gm, bt, t) = (p(g, ps, "x"), p(g, ps, "gamma"), p(g, ps, "beta"), p(g, ps, "t"));
        let ln = g.layer_norm(x, gm, bt, 1e-5)?;
        let sm = g.softmax(ln);
        let prod = g.mul(sm, t)?;
        let left = g.slice_cols(prod, 1, 3)?;
        let right = g.slice_cols(ln, 0, 2)?;
        let cat = g.concat_cols(&[left, right])?;
        let rows = g.slice_rows(cat, 1, 2)?;
        let sel = g.select_rows(&[true, false, true, false], x, t)?;
        let a = g.sum(rows);
        let b = g.mean(sel);
        let r = g.reshape(a, &[1])?;
        let r = g.sum(r);
        g.add(r, b)
    });
}

#[test]
fn embedding_attention_and_losses() {
    let mut ps = ParamSet::new();
    param(&mut ps, "emb", &[7, 8], 8);
    param(&mut ps, "wq", &[8, 8], 9);
    param(&mut ps, "out", &[8, 7], 10);
    let ids = [3usize, 1, 4, 1, 5, 6];
    run(&mut ps, |g, ps| {
        let (emb, wq, out) = (p(g, ps, "emb"), p(g, ps, "wq"), p(g, ps, "out"));
        let x = g.embedding(emb, &ids)?;
        let q = g.matmul(x, wq)?;
        let qh = g.split_heads(q, 2, 3, 2)?;
        let kh = g.split_heads(x, 2, 3, 2)?;
        let scores = g.bmm_nt(qh, kh)?;
        let scores = g.scale(scores, 0.5);
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, kh)?;
        let merged = g.merge_heads(ctx, 2, 3, 2)?;
        let logits = g.matmul(merged, out)?;
        let ce = g.masked_cross_entropy(logits, &[0, 2, 1, 6, 3, 5], &[true, false, true, true, false, true])?;
        let first = g.slice_cols(logits, 0, 1)?;
        let bce = g.bce_with_logits(first, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], Some(&[1.0, 2.0, 1.0, 2.0, 1.0, 1.0]))?;
        g.add(ce, bce)
    });
}

#[test]
fn relative_error_definition() {
    assert_eq!(rel_error(1.0, 1.0), 0.0);
    assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    assert!((rel_error(0.0, 1e-4) - 0.1).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(&[rows, cols], values(rows * cols, seed).iter().map(|v| (*v * 30.0) as f32).collect()).unwrap());
        let s = g.softmax(x);
        for row in g.value(s).data().chunks(cols) {
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_centered(rows in 1usize..5, cols in 2usize..9, seed in 0u64..1000) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(&[rows, cols], values(rows * cols, seed).iter().map(|v| (*v * 10.0) as f32).collect()).unwrap());
        let gm = g.input(Tensor::full(&[cols], 1.0));
        let bt = g.input(Tensor::zeros(&[cols]));
        let y = g.layer_norm(x, gm, bt, 1e-5).unwrap();
        for row in g.value(y).data().chunks(cols) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-5);
        }
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(z in -1e4f32..1e4) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(&[1], vec![z]).unwrap());
        let s = g.sigmoid(x);
        let v = g.value(s).item();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn every_layer_passes_on_twenty_random_shapes() {
    use ehrseq::models::gradsuite::{run_suite, LAYERS};
    let checks = run_suite(20, 11).unwrap();
    assert_eq!(checks.len(), 20 * LAYERS.len());
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn suite_rejects_unknown_layers() {
    assert!(ehrseq::models::gradsuite::check_layer("conv2d", 1).is_err());
}
