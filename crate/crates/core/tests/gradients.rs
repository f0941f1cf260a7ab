mod common;

use common::{model_gradient_errors, random_tensor, tiny_config};
use ismrnn::mamba::{causal_conv, selective_scan};
use ismrnn::model::IsmrnnModel;
use ismrnn::tensor::{finite_difference_oracle, relative_error, NumericGrad, Tape, Tensor, Var};
use ismrnn::Result;

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces `out` against fixed random weights so every output element matters.
fn scalarize(tape: &mut Tape, out: Var) -> Var {
    let w = random_tensor(tape.shape(out), 999);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod).unwrap()
}

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::with_seed(5);
    tape.set_training(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, out);
    tape.value(s).data()[0]
}

fn check(name: &str, inputs: Vec<Tensor>, build: &Build) {
    let mut tape = Tape::with_seed(5);
    tape.set_training(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, out);
    tape.backward(s).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap();
        let numeric = finite_difference_oracle(
            |theta| {
                let mut ins = inputs.clone();
                ins[k].data_mut().copy_from_slice(theta);
                eval(build, &ins)
            },
            inputs[k].data(),
            1e-6,
        )
        .unwrap();
        for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
            if let NumericGrad::Value(n) = n {
                let err = relative_error(*a, *n, 1e-6);
                assert!(err < 1e-6, "{name}: input {k} element {i}: analytic {a} numeric {n}");
            }
        }
    }
}

fn t(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, seed)
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, seed).map(|v| v.abs() + 0.5)
}

#[test]
fn elementwise_binary_with_broadcasting() {
    check("add", vec![t(&[3, 4], 1), t(&[4], 2)], &|tp, v| tp.add(v[0], v[1]));
    check("sub", vec![t(&[3, 1], 3), t(&[3, 4], 4)], &|tp, v| tp.sub(v[0], v[1]));
    check("mul", vec![t(&[2, 3, 4], 5), t(&[3, 1], 6)], &|tp, v| tp.mul(v[0], v[1]));
    check("div", vec![t(&[2, 3], 7), positive(&[3], 8)], &|tp, v| tp.div(v[0], v[1]));
}

#[test]
fn elementwise_unary() {
    check("neg", vec![t(&[5], 1)], &|tp, v| tp.neg(v[0]));
    check("scale", vec![t(&[5], 2)], &|tp, v| tp.scale(v[0], -2.5));
    check("sigmoid", vec![t(&[6], 3)], &|tp, v| tp.sigmoid(v[0]));
    check("tanh", vec![t(&[6], 4)], &|tp, v| tp.tanh(v[0]));
    check("silu", vec![t(&[6], 5)], &|tp, v| tp.silu(v[0]));
    check("softplus", vec![t(&[6], 6)], &|tp, v| tp.softplus(v[0]));
    check("exp", vec![t(&[6], 7)], &|tp, v| tp.exp(v[0]));
    check("abs", vec![positive(&[6], 8).map(|v| if v > 1.0 { -v } else { v })], &|tp, v| tp.abs(v[0]));
}

#[test]
fn linear_algebra() {
    check("matmul", vec![t(&[3, 4], 1), t(&[4, 2], 2)], &|tp, v| tp.matmul(v[0], v[1]));
    check("linear", vec![t(&[2, 3, 4], 3), t(&[5, 4], 4), t(&[5], 5)], &|tp, v| {
        tp.linear(v[0], v[1], Some(v[2]))
    });
    check("linear no bias", vec![t(&[3, 4], 6), t(&[2, 4], 7)], &|tp, v| tp.linear(v[0], v[1], None));
}

#[test]
fn structural() {
    check("concat", vec![t(&[2, 3], 1), t(&[2, 2], 2)], &|tp, v| tp.concat(&[v[0], v[1]], 1));
    check("narrow", vec![t(&[3, 5], 3)], &|tp, v| tp.narrow(v[0], 1, 1, 3));
    check("reshape", vec![t(&[3, 4], 4)], &|tp, v| tp.reshape(v[0], &[2, 6]));
    check("permute", vec![t(&[2, 3, 4], 5)], &|tp, v| tp.permute(v[0], &[2, 0, 1]));
    check("index_select", vec![t(&[4, 3], 6)], &|tp, v| tp.index_select(v[0], &[3, 0, 0, 2, 3]));
}

#[test]
fn reductions() {
    check("mean_axis", vec![t(&[2, 3, 4], 1)], &|tp, v| tp.mean_axis(v[0], 1));
    check("sum_all", vec![t(&[2, 3], 2)], &|tp, v| tp.sum_all(v[0]));
    check("mean_all", vec![t(&[2, 3], 3)], &|tp, v| tp.mean_all(v[0]));
}

#[test]
fn dropout_with_a_fixed_mask() {
    // The tape RNG is reseeded per evaluation, so the mask is the same each time.
    check("dropout", vec![t(&[20], 1)], &|tp, v| tp.dropout(v[0], 0.3));
}

#[test]
fn scan_helper() {
    check("scan", vec![t(&[2, 3], 1), t(&[2, 4, 3], 2)], &|tp, v| {
        let (ys, last) = tp.scan(v[0], v[1], |tp, h, x| {
            let a = tp.mul(h, x)?;
            let a = tp.tanh(a)?;
            tp.add(a, x)
        })?;
        let s = tp.sum_all(ys)?;
        let s = tp.reshape(s, &[1])?;
        let l = tp.reshape(last, &[6])?;
        tp.concat(&[s, l], 0)
    });
}

#[test]
fn fused_selective_scan() {
    let (b, l, e, n) = (2, 5, 3, 2);
    let inputs = vec![
        t(&[b, l, e], 1),
        positive(&[b, l, e], 2).map(|v| v * 0.3),
        positive(&[e, n], 3).map(|v| -v),
        t(&[b, l, n], 4),
        t(&[b, l, n], 5),
        t(&[e], 6),
    ];
    check("selective_scan", inputs, &|tp, v| selective_scan(tp, v[0], v[1], v[2], v[3], v[4], v[5]));
}

#[test]
fn causal_depthwise_conv() {
    check("causal_conv", vec![t(&[2, 6, 3], 1), t(&[3, 4], 2), t(&[3], 3)], &|tp, v| {
        causal_conv(tp, v[0], v[1], v[2])
    });
}

#[test]
fn full_model_gradients_on_tiny_config() {
    let model = IsmrnnModel::new(tiny_config(), 42).unwrap();
    let x = random_tensor(&[3, 8, 2], 1);
    let y = random_tensor(&[3, 4, 2], 2);
    for (name, err) in model_gradient_errors(&model, &x, &y, 1e-5, 1e-6) {
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
}
