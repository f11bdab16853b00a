use memepair::tensor::{finite_diff_check, GradCheckConfig, Graph, ParameterSet, Tensor, TensorError, Var};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_matrix(lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..8).prop_flat_map(move |(r, c)| matrix(r, c, lo, hi))
}

proptest! {
    // Logit gaps stay below ~36, past which 1 - exp(-gap) rounds to 1.0 in f64.
    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix(-15.0, 15.0)) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax_rows(v).unwrap();
        let out = g.value(s);
        for i in 0..out.rows() {
            let row = out.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && (p < 1.0 || row.len() == 1)));
        }
    }

    #[test]
    fn layer_norm_standardizes(x in (1usize..5, 4usize..12).prop_flat_map(|(r, c)| matrix(r, c, -50.0, 50.0))) {
        let cols = x.cols();
        // The unit-variance claim needs row variance far above eps.
        for i in 0..x.rows() {
            let row = x.row(i);
            let m = row.iter().sum::<f64>() / cols as f64;
            prop_assume!(row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64 > 10.0);
        }
        let mut g = Graph::new();
        let v = g.constant(x);
        let gamma = g.constant(Tensor::vector(vec![1.0; cols]));
        let beta = g.constant(Tensor::vector(vec![0.0; cols]));
        let y = g.layer_norm(v, gamma, beta, 1e-5).unwrap();
        let out = g.value(y);
        for i in 0..out.rows() {
            let row = out.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-9, "mean {mean}");
            prop_assert!((var - 1.0).abs() <= 1e-6, "var {var}");
        }
    }
}

/// Exercises every differentiable op in one scalar objective.
fn composite(p: &ParameterSet) -> Result<(Graph, Var), TensorError> {
    let mut g = Graph::new();
    let a = g.param("a", p.get("a").unwrap());
    let b = g.param("b", p.get("b").unwrap());
    let bias = g.param("bias", p.get("bias").unwrap());
    let gamma = g.param("gamma", p.get("gamma").unwrap());
    let beta = g.param("beta", p.get("beta").unwrap());
    let emb = g.param("emb", p.get("emb").unwrap());

    let h = g.matmul(a, b)?;
    let h = g.add_row(h, bias)?;
    let h = g.layer_norm(h, gamma, beta, 1e-5)?;
    let act = g.gelu(h)?;
    let t = g.tanh(h)?;
    let m = g.mul(act, t)?;
    let tr = g.transpose(m)?;
    let sq = g.matmul(m, tr)?;
    let sm = g.softmax_rows(sq)?;
    let sm = g.scale(sm, 2.5)?;
    let left = g.slice_cols(sm, 0, 2)?;
    let rows = g.gather_rows(emb, &[1, 0, 1])?;
    let both = g.concat_cols(&[left, rows])?;
    let r0 = g.row(both, 2)?;
    let stacked = g.concat_rows(&[both, r0])?;
    let s = g.add(stacked, stacked)?;
    let total = g.sum(s)?;
    let logits = g.slice_cols(both, 0, 2)?;
    let first = g.row(logits, 0)?;
    let flat = g.reshape(first, &[2])?;
    let ce = g.cross_entropy(flat, 1)?;
    let total = g.reshape(total, &[1, 1])?;
    let ce = g.reshape(ce, &[1, 1])?;
    let parts = g.concat_rows(&[total, ce])?;
    let loss = g.sum(parts)?;
    Ok((g, loss))
}

fn composite_params(values: &[f64]) -> ParameterSet {
    let mut it = values.iter().copied();
    let mut take = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (&mut it).take(n).collect()).unwrap()
    };
    let mut p = ParameterSet::new();
    p.insert("a", take(vec![3, 4])).unwrap();
    p.insert("b", take(vec![4, 5])).unwrap();
    p.insert("bias", take(vec![5])).unwrap();
    let gamma: Vec<f64> = take(vec![5]).into_data().into_iter().map(|v| 1.0 + v).collect();
    p.insert("gamma", Tensor::vector(gamma)).unwrap();
    p.insert("beta", take(vec![5])).unwrap();
    p.insert("emb", take(vec![2, 3])).unwrap();
    p
}

const N_COMPOSITE: usize = 12 + 20 + 5 + 5 + 5 + 6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_gradients_match_finite_differences(values in prop::collection::vec(-1.0f64..1.0, N_COMPOSITE)) {
        let params = composite_params(&values);
        let report = finite_diff_check(composite, &params, &GradCheckConfig::default()).unwrap();
        prop_assert!(report.passed(), "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn replay_is_bitwise_deterministic(values in prop::collection::vec(-1.0f64..1.0, N_COMPOSITE)) {
        let params = composite_params(&values);
        let run = || {
            let (mut g, loss) = composite(&params).unwrap();
            g.backward(loss).unwrap().into_params()
        };
        let (a, b) = (run(), run());
        for (name, ga) in &a {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(ga), bits(&b[name]), "{}", name);
        }
    }
}
