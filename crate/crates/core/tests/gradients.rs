//! Reverse-mode gradients of every primitive against central finite differences.

use divcon_core::{Rng, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 100;

/// Central-difference gradient of `f` at `x`.
fn numeric_grad(f: &dyn Fn(&[Tensor<f64>]) -> f64, xs: &[Tensor<f64>], which: usize) -> Tensor<f64> {
    let mut g = Tensor::zeros(xs[which].shape());
    for k in 0..xs[which].len() {
        let mut plus = xs.to_vec();
        plus[which].data_mut()[k] += STEP;
        let mut minus = xs.to_vec();
        minus[which].data_mut()[k] -= STEP;
        g.data_mut()[k] = (f(&plus) - f(&minus)) / (2.0 * STEP);
    }
    g
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.sub(b).unwrap().norm2();
    let scale = a.norm2() + b.norm2();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Checks `sum(weights ⊙ build(inputs))` against finite differences.
fn check(name: &str, shapes: &[&[usize]], sample: &dyn Fn(&mut Rng, &[usize]) -> Tensor<f64>, build: &Build) {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut rng = Rng::new(1000 + inst);
        let xs: Vec<Tensor<f64>> = shapes.iter().map(|s| sample(&mut rng, s)).collect();
        // fixed random readout so every output component contributes
        let out_shape = {
            let mut tape = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let y = build(&mut tape, &vs);
            tape.shape(y).to_vec()
        };
        let readout = rng.normal_tensor::<f64>(&out_shape);
        let f = |inputs: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let y = build(&mut tape, &vs);
            tape.value(y).dot(&readout).unwrap()
        };
        let mut tape = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = build(&mut tape, &vs);
        let r = tape.constant(readout.clone());
        let root = tape.dot(y, r).unwrap();
        tape.backward(root).unwrap();
        for (i, &v) in vs.iter().enumerate() {
            let analytic = tape.grad_or_zeros(v);
            let numeric = numeric_grad(&f, &xs, i);
            worst = worst.max(rel_err(&analytic, &numeric));
        }
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn normal(rng: &mut Rng, s: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(s)
}

fn positive(rng: &mut Rng, s: &[usize]) -> Tensor<f64> {
    rng.normal_tensor::<f64>(s).map(|x| 0.5 + x.abs())
}

#[test]
fn elementwise_primitives() {
    check("add", &[&[3, 4], &[3, 4]], &normal, &|t, v| t.add(v[0], v[1]).unwrap());
    check("add_broadcast", &[&[3, 4], &[4]], &normal, &|t, v| t.add(v[0], v[1]).unwrap());
    check("sub_broadcast", &[&[3, 4], &[3, 1]], &normal, &|t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", &[&[2, 5], &[2, 5]], &normal, &|t, v| t.mul(v[0], v[1]).unwrap());
    check("mul_broadcast", &[&[2, 3, 2], &[3, 1]], &normal, &|t, v| t.mul(v[0], v[1]).unwrap());
    check("div", &[&[2, 3], &[2, 1]], &positive, &|t, v| t.div(v[0], v[1]).unwrap());
    check("scale", &[&[4]], &normal, &|t, v| t.scale(v[0], -2.5));
    check("add_scalar", &[&[4]], &normal, &|t, v| t.add_scalar(v[0], 3.0));
    check("tanh", &[&[3, 3]], &normal, &|t, v| t.tanh(v[0]));
    check("exp", &[&[3, 3]], &normal, &|t, v| t.exp(v[0]));
    check("log", &[&[3, 3]], &positive, &|t, v| t.log(v[0]));
    check("sqrt", &[&[3, 3]], &positive, &|t, v| t.sqrt(v[0]));
}

#[test]
fn linear_algebra_primitives() {
    check("matmul", &[&[3, 4], &[4, 2]], &normal, &|t, v| t.matmul(v[0], v[1]).unwrap());
    check("transpose", &[&[3, 4]], &normal, &|t, v| t.transpose(v[0]).unwrap());
    check("dot", &[&[5], &[5]], &normal, &|t, v| t.dot(v[0], v[1]).unwrap());
    check("norm2", &[&[2, 3]], &normal, &|t, v| t.norm2(v[0]));
    check("row_norm", &[&[4, 3]], &normal, &|t, v| t.row_norm(v[0]).unwrap());
}

#[test]
fn reductions_and_shape_primitives() {
    check("sum", &[&[2, 3]], &normal, &|t, v| t.sum(v[0]));
    check("mean", &[&[2, 3]], &normal, &|t, v| t.mean(v[0]));
    check("sum_axis0", &[&[2, 3, 4]], &normal, &|t, v| t.sum_axis(v[0], 0).unwrap());
    check("sum_axis1", &[&[2, 3, 4]], &normal, &|t, v| t.sum_axis(v[0], 1).unwrap());
    check("mean_axis2", &[&[2, 3, 4]], &normal, &|t, v| t.mean_axis(v[0], 2).unwrap());
    check("reshape", &[&[2, 6]], &normal, &|t, v| t.reshape(v[0], &[3, 4]).unwrap());
    check("concat", &[&[2, 1, 3], &[2, 2, 3]], &normal, &|t, v| t.concat(&[v[0], v[1]], 1).unwrap());
    check("slice", &[&[3, 5]], &normal, &|t, v| t.slice(v[0], 1, 1, 3).unwrap());
}

#[test]
fn convolution_primitive() {
    check("conv2d", &[&[2, 3, 5, 4], &[2, 3, 3, 3], &[2]], &normal, &|t, v| {
        t.conv2d(v[0], v[1], v[2]).unwrap()
    });
}

/// Random symmetric positive-definite matrix `BᵀB + I`.
fn spd(rng: &mut Rng, s: &[usize]) -> Tensor<f64> {
    let b = rng.normal_tensor::<f64>(s);
    b.transpose().unwrap().matmul(&b).unwrap().add(&Tensor::eye(s[0])).unwrap()
}

#[test]
fn logdet_matches_finite_differences() {
    // symmetric perturbations: differentiate through (X + Xᵀ)/2
    check("logdet_psd", &[&[3, 3]], &spd, &|t, v| {
        let xt = t.transpose(v[0]).unwrap();
        let s = t.add(v[0], xt).unwrap();
        let s = t.scale(s, 0.5);
        t.logdet_psd(s, 1e-3).unwrap()
    });
}

#[test]
fn composite_network_gradient() {
    check("mlp", &[&[4, 6], &[6, 5], &[5]], &normal, &|t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add(h, v[2]).unwrap();
        let h = t.tanh(h);
        let n = t.row_norm(h).unwrap();
        let n = t.reshape(n, &[4, 1]).unwrap();
        t.div(h, n).unwrap()
    });
}
