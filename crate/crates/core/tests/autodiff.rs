//! Gradient soundness of every built-in op against central differences.

use std::sync::Arc;

use dsgdn_core::autodiff::{
    custom_grad_apply, finite_diff_check, CheckStatus, CustomGrad, EdgeList, GradCheckOptions, ParamStore, Tape,
    TapeObjective, Tensor, Var,
};
use dsgdn_core::rng;
use dsgdn_core::Result;
use rand::Rng;

type BuildFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Random-weighted sum of `build(inputs)` so every output element gets a
/// distinct upstream gradient.
fn weighted_objective(shapes: Vec<Vec<usize>>, build: Box<BuildFn>, seed: u64) -> impl FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var> {
    move |tape, store| {
        let vars: Vec<Var> = (0..shapes.len())
            .map(|i| tape.param(store, &format!("x{i}")))
            .collect::<Result<_>>()?;
        let y = build(tape, &vars)?;
        let w = Tensor::randn(tape.shape(y), 1.0, &mut rng::stream(seed, "weights", 0));
        let w = tape.constant(w);
        let yw = tape.mul(y, w)?;
        Ok(tape.sum(yw))
    }
}

fn check(name: &str, shapes: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Clone + 'static, trials: u64) {
    for trial in 0..trials {
        let mut r = rng::stream(trial, name, 0);
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.insert(format!("x{i}"), Tensor::randn(s, 1.0, &mut r));
        }
        let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
        let mut obj = TapeObjective(weighted_objective(shapes, Box::new(build.clone()), trial));
        let report = finite_diff_check(&mut obj, &store, &GradCheckOptions { eps: 1e-6, tol: 1e-6, ..Default::default() }).unwrap();
        assert!(report.passed(), "{name} trial {trial}:\n{report}");
    }
}

const TRIALS: u64 = 100;

#[test]
fn elementwise_ops() {
    check("add", &[&[3, 4], &[4]], |t, v| t.add(v[0], v[1]), TRIALS);
    check("sub", &[&[2, 1, 3], &[4, 1]], |t, v| t.sub(v[0], v[1]), TRIALS);
    check("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]), TRIALS);
    check("mul_scalar", &[&[5], &[]], |t, v| t.mul(v[0], v[1]), TRIALS);
    check("scale", &[&[3, 2]], |t, v| Ok(t.scale(v[0], -1.7)), TRIALS);
    check("shift", &[&[3, 2]], |t, v| Ok(t.shift(v[0], 0.3)), TRIALS);
    check("exp", &[&[6]], |t, v| Ok(t.exp(v[0])), TRIALS);
    check("sum", &[&[2, 3]], |t, v| Ok(t.sum(v[0])), TRIALS);
}

#[test]
fn activations() {
    check("leaky_relu", &[&[4, 5]], |t, v| Ok(t.leaky_relu(v[0], 0.2)), TRIALS);
    check("relu", &[&[4, 5]], |t, v| Ok(t.relu(v[0])), TRIALS);
    check("gelu", &[&[4, 5]], |t, v| Ok(t.gelu(v[0])), TRIALS);
    check("log_softmax", &[&[3, 6]], |t, v| Ok(t.log_softmax(v[0])), TRIALS);
    check("softmax", &[&[3, 6]], |t, v| Ok(t.softmax(v[0])), TRIALS);
    check(
        "softmax_masked",
        &[&[3, 4]],
        |t, v| t.softmax_masked(v[0], &[true, false, true, true, false, false, false, false, true, true, true, true]),
        TRIALS,
    );
    check("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), TRIALS);
}

#[test]
fn linear_algebra_and_shapes() {
    check("matmul", &[&[4, 5], &[5, 3]], |t, v| t.matmul(v[0], v[1]), TRIALS);
    check("matmul_batched", &[&[2, 3, 4, 5], &[2, 3, 5, 2]], |t, v| t.matmul(v[0], v[1]), TRIALS);
    check("matmul_broadcast", &[&[2, 3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]), TRIALS);
    check("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1]), TRIALS);
    check("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]), TRIALS);
    check("concat", &[&[2, 3], &[2, 1]], |t, v| t.concat_last(&[v[0], v[1], v[0]]), TRIALS);
    check("slice", &[&[2, 5]], |t, v| t.slice_last(v[0], 1, 3), TRIALS);
    check("gather", &[&[4, 3]], |t, v| t.gather(v[0], &[0, 3, 3, 1, 0, 2], &[2, 3]), TRIALS);
    check("index_select", &[&[4, 2, 3]], |t, v| t.index_select(v[0], &[3, 0, 3]), TRIALS);
}

fn toy_edges() -> Arc<EdgeList> {
    // two graphs of three nodes, one empty row
    let ids = [
        1, 2, 0, //
        3, 1, 4, //
        0, 5, 1, //
        1, 0, 0, //
        0, 0, 0, //
        2, 3, 1,
    ];
    Arc::new(EdgeList::from_dense(2, 3, &ids))
}

#[test]
fn sparse_attention_primitives() {
    let edges = toy_edges();
    let e = edges.clone();
    check("edge_scores", &[&[2, 3], &[2, 3, 1], &[6, 1]], move |t, v| t.edge_scores(v[0], v[1], Some(v[2]), &e), TRIALS);
    let e = edges.clone();
    check("segment_softmax", &[&[11]], move |t, v| t.segment_softmax(v[0], &e), TRIALS);
    let e = edges.clone();
    check("edge_aggregate", &[&[11], &[2, 3, 4]], move |t, v| t.edge_aggregate(v[0], v[1], &e), TRIALS);
}

#[test]
fn masked_nll_gradient() {
    check("masked_nll", &[&[4, 3]], |t, v| {
        let lp = t.log_softmax(v[0]);
        t.masked_nll(lp, &[Some(0), None, Some(2), Some(2)])
    }, TRIALS);
}

#[test]
fn matmul_f32_against_f64_differences() {
    let mut r = rng::stream(11, "mm32", 0);
    let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
    let mut tape = Tape::<f32>::new();
    let av = tape.var(a.cast());
    let bv = tape.var(b.cast());
    let wv = tape.constant(w.cast());
    let c = tape.matmul(av, bv).unwrap();
    let cw = tape.mul(c, wv).unwrap();
    let loss = tape.sum(cw);
    let g = tape.backward(loss).unwrap();

    let f = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                let c: f64 = (0..5).map(|p| a.get(&[i, p]) * b.get(&[p, j])).sum();
                s += c * w.get(&[i, j]);
            }
        }
        s
    };
    let eps = 1e-6;
    let mut max = 0.0f64;
    for (which, (x, gx)) in [(&a, g.get(av).unwrap()), (&b, g.get(bv).unwrap())].into_iter().enumerate() {
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            let num = if which == 0 { (f(&plus, &b) - f(&minus, &b)) / (2.0 * eps) } else { (f(&a, &plus) - f(&a, &minus)) / (2.0 * eps) };
            max = max.max((num - gx.data()[i] as f64).abs());
        }
    }
    assert!(max < 1e-4, "max abs diff {max}");
}

#[test]
fn matmul_examples_and_errors() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]));
    let x = tape.constant(Tensor::from_f64(&[2, 1], &[3., 4.]));
    let y = tape.matmul(i2, x).unwrap();
    assert_eq!(tape.value(y).data(), &[3., 4.]);
    let r = tape.constant(Tensor::from_f64(&[1, 2], &[1., 2.]));
    let y = tape.matmul(r, x).unwrap();
    assert_eq!(tape.value(y).data(), &[11.]);
    let err = tape.matmul(x, x).unwrap_err().to_string();
    assert!(err.contains("[2, 1]"), "{err}");
}

#[test]
fn softmax_masked_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[3], &[0., 0., 0.]));
    let y = tape.softmax_masked(x, &[true; 3]).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::from_f64(&[2], &[5., 9.]));
    let y = tape.softmax_masked(x, &[true, false]).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 0.]);
    let x = tape.constant(Tensor::from_f64(&[3], &[1., 2., 3.]));
    let y = tape.softmax_masked(x, &[true, true, false]).unwrap();
    let z = 1f64.exp() + 2f64.exp();
    let expect = [1f64.exp() / z, 2f64.exp() / z, 0.0];
    for (a, b) in tape.value(y).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::from_f64(&[2], &[1., 2.]));
    let y = tape.softmax_masked(x, &[false, false]).unwrap();
    assert_eq!(tape.value(y).data(), &[0., 0.]);
}

#[test]
fn softmax_masked_rows_random() {
    let mut r = rng::stream(5, "smx", 0);
    for _ in 0..100 {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(&[4, 7], 3.0, &mut r));
        let mask: Vec<bool> = (0..28).map(|_| r.random_bool(0.6)).collect();
        let y = tape.softmax_masked(x, &mask).unwrap();
        for (row, m) in tape.value(y).data().chunks(7).zip(mask.chunks(7)) {
            let s: f64 = row.iter().sum();
            if m.iter().any(|&v| v) {
                assert!((s - 1.0).abs() < 1e-6);
            } else {
                assert_eq!(s, 0.0);
            }
            for (p, &v) in row.iter().zip(m) {
                if !v {
                    assert_eq!(*p, 0.0);
                }
            }
        }
    }
}

#[test]
fn activation_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1], &[-1.0]));
    let y = tape.leaky_relu(x, 0.2);
    assert!((tape.value(y).item() + 0.2).abs() < 1e-15);

    let x = tape.constant(Tensor::from_f64(&[1, 4], &[2.5; 4]));
    let g = tape.constant(Tensor::from_f64(&[4], &[1.0; 4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0; 4]);
}

#[test]
fn gelu_at_named_points() {
    for x0 in [-2.0, -0.5, 0.0, 0.5, 2.0] {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_f64(&[1], &[x0]));
        let y = tape.gelu(x);
        let y = tape.sum(y);
        let g = tape.backward(y).unwrap().get(x).unwrap().item();
        let f = |x: f64| 0.5 * x * (1.0 + libm_erf(x / 2f64.sqrt()));
        let h = 1e-6;
        let num = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
        assert!((g - num).abs() < 1e-4, "x={x0}: {g} vs {num}");
    }
}

/// Abramowitz–Stegun 7.1.26 is too coarse; use the series/continued
/// fraction from the standard library of another crate? Keep it
/// independent: erf via high-order Taylor series (|x| <= 2 here).
fn libm_erf(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0;
    while term.abs() > 1e-17 || n < 5.0 {
        sum += term / (2.0 * n + 1.0);
        n += 1.0;
        term *= -x * x / n;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

// ── custom gradient hook ─────────────────────────────────────────────

struct DivideByOneMinus;

impl CustomGrad<f64> for DivideByOneMinus {
    fn name(&self) -> &str {
        "div_one_minus"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        let theta = inputs[1].item();
        Ok(inputs[0].map(|x| x / (1.0 - theta)))
    }

    fn backward(&self, up: &Tensor<f64>, inputs: &[&Tensor<f64>], _out: &Tensor<f64>) -> Vec<Option<Tensor<f64>>> {
        let theta = inputs[1].item();
        vec![Some(up.map(|g| g / (1.0 - theta))), None]
    }
}

struct WrongShape;

impl CustomGrad<f64> for WrongShape {
    fn name(&self) -> &str {
        "wrong_shape"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        Ok(inputs[0].clone())
    }

    fn backward(&self, _up: &Tensor<f64>, _inputs: &[&Tensor<f64>], _out: &Tensor<f64>) -> Vec<Option<Tensor<f64>>> {
        vec![Some(Tensor::zeros(&[7]))]
    }
}

fn run_custom(theta: f64) -> (Vec<f64>, Vec<f64>, Option<f64>) {
    let mut tape = Tape::<f64>::new();
    let x = tape.var(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]));
    let t = tape.var(Tensor::scalar(theta));
    let y = custom_grad_apply(&mut tape, Box::new(DivideByOneMinus), &[x, t]).unwrap();
    let w = tape.constant(Tensor::from_f64(&[3], &[0.3, 1.0, -2.0]));
    let yw = tape.mul(y, w).unwrap();
    let loss = tape.sum(yw);
    let g = tape.backward(loss).unwrap();
    (
        tape.value(y).data().to_vec(),
        g.get(x).unwrap().data().to_vec(),
        g.get(t).map(|t| t.item()),
    )
}

#[test]
fn custom_grad_identity_at_zero_theta() {
    let (y, gx, gt) = run_custom(0.0);
    assert_eq!(y, vec![1.0, -2.0, 0.5]);
    assert_eq!(gx, vec![0.3, 1.0, -2.0]);
    assert_eq!(gt, None);
}

#[test]
fn custom_grad_half_theta_blocks_theta() {
    let (y, gx, gt) = run_custom(0.5);
    assert_eq!(y, vec![2.0, -4.0, 1.0]);
    assert_eq!(gx, vec![0.6, 2.0, -4.0]);
    assert!(gt.is_none_or(|g| g == 0.0));
}

#[test]
fn custom_grad_finite_difference_and_blocked_flag() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]));
    store.insert("theta", Tensor::scalar(0.3));
    let mut obj = TapeObjective(|tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let x = tape.param(s, "x")?;
        let t = tape.param(s, "theta")?;
        let y = tape.custom(Box::new(DivideByOneMinus), &[x, t])?;
        let w = tape.constant(Tensor::from_f64(&[3], &[0.3, 1.0, -2.0]));
        let yw = tape.mul(y, w)?;
        Ok(tape.sum(yw))
    });
    let opts = GradCheckOptions {
        eps: 1e-6,
        tol: 1e-4,
        blocked: vec!["theta".into()],
        ..Default::default()
    };
    let report = finite_diff_check(&mut obj, &store, &opts).unwrap();
    assert!(report.passed(), "{report}");
    let x = report.get("x").unwrap();
    for (a, w) in x.analytic.iter().zip([0.3, 1.0, -2.0]) {
        assert!((a - w / 0.7).abs() < 1e-12);
    }
    let t = report.get("theta").unwrap();
    assert_eq!(t.status, CheckStatus::IntentionallyBlocked);
    assert_eq!(t.analytic, vec![0.0]);
    assert!(t.numeric[0].abs() > 1e-3);
}

#[test]
fn custom_grad_wrong_shape_is_internal_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.var(Tensor::from_f64(&[2], &[1.0, 2.0]));
    let y = tape.custom(Box::new(WrongShape), &[x]).unwrap();
    let l = tape.sum(y);
    let err = tape.backward(l).err().unwrap();
    assert!(matches!(err, dsgdn_core::Error::Internal(_)), "{err}");
}

#[test]
fn quadratic_gradcheck_report() {
    let mut store = ParamStore::new();
    store.insert("x", Tensor::from_f64(&[2], &[1.0, 2.0]));
    let mut obj = TapeObjective(|tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let x = tape.param(s, "x")?;
        let sq = tape.mul(x, x)?;
        Ok(tape.sum(sq))
    });
    let report = finite_diff_check(&mut obj, &store, &GradCheckOptions::default()).unwrap();
    assert!(report.passed());
    let x = report.get("x").unwrap();
    assert_eq!(x.analytic, vec![2.0, 4.0]);
    assert!(x.max_abs_err < 1e-6);
}

#[test]
fn non_finite_objective_names_parameter() {
    let mut store = ParamStore::new();
    // finite at the base point, overflows once perturbed by eps
    store.insert("x", Tensor::from_f64(&[1], &[7.0e-7]));
    let mut obj = TapeObjective(|tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let x = tape.param(s, "x")?;
        let big = tape.scale(x, 1e9);
        let e = tape.exp(big);
        Ok(tape.sum(e))
    });
    let err = finite_diff_check(&mut obj, &store, &GradCheckOptions::default()).unwrap_err();
    assert!(err.to_string().contains("`x`[0]"), "{err}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng::stream(3, "det", 0);
        let mut tape = Tape::<f32>::new();
        let a = tape.var(Tensor::randn(&[8, 16], 1.0, &mut r));
        let b = tape.var(Tensor::randn(&[16, 4], 1.0, &mut r));
        let c = tape.matmul(a, b).unwrap();
        let c = tape.gelu(c);
        let c = tape.log_softmax(c);
        tape.value(c).clone()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}
