//! Analytic gradients against central finite differences.

mod common;

use common::*;
use fuseseg_core::graph::Graph;
use fuseseg_core::kernels::ConvGeometry;
use fuseseg_core::model::{Model, ModelSpec, SaConfig, SpatialAttention, Variant};
use fuseseg_core::objectives::{combined_loss, LossConfig};
use fuseseg_core::{Tensor, Var};

type Op = dyn Fn(&mut Graph<'_>, &[Var]) -> Var;

/// Checks every input of `op` under the head `sum(sigmoid(op(..)))`,
/// sampling at least 50 coordinates in total.
fn check(name: &str, inputs: Vec<Tensor>, op: &Op, seed: u64) {
    let eval = |xs: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let y = op(&mut g, &vars);
        let s = g.sigmoid(y);
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
        (g.value(loss).item().unwrap(), grads)
    };
    let (_, grads) = eval(&inputs);
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut r = rng(seed);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let share = ((60 * x.len()).div_ceil(total)).max(5);
        for i in sample_indices(x.len(), share, &mut r) {
            let xs = inputs.clone();
            let numeric = central_diff(&mut xs[k].clone(), i, &mut |t| {
                let mut ys = inputs.clone();
                ys[k] = t.clone();
                eval(&ys).0
            });
            let err = rel_err(grads[k][i], numeric);
            worst = worst.max(err);
            assert!(err < FD_TOL, "{name}: input {k} coord {i}: analytic {} numeric {numeric}", grads[k][i]);
            checked += 1;
        }
    }
    assert!(checked >= 50, "{name}: only {checked} coordinates");
    eprintln!("{name}: {checked} coordinates, worst relative error {worst:.2e}");
}

#[test]
fn conv2d_with_bias() {
    let mut r = rng(1);
    let inputs = vec![
        uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut r),
        uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut r),
        uniform(&[4], -0.5, 0.5, &mut r),
    ];
    check(
        "conv2d",
        inputs,
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::same(3, 1)).unwrap(),
        10,
    );
}

#[test]
fn conv2d_dilated_strided() {
    let mut r = rng(2);
    let inputs = vec![uniform(&[1, 2, 9, 9], -1.0, 1.0, &mut r), uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r)];
    let geom = ConvGeometry {
        stride: 2,
        dilation: 2,
        padding: 1,
    };
    check("conv2d dilated", inputs, &move |g, v| g.conv2d(v[0], v[1], None, geom).unwrap(), 11);
}

#[test]
fn conv_transpose2d_stride2() {
    let mut r = rng(3);
    let inputs = vec![
        uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut r),
        uniform(&[4, 2, 2, 2], -0.5, 0.5, &mut r),
        uniform(&[2], -0.5, 0.5, &mut r),
    ];
    let geom = ConvGeometry {
        stride: 2,
        dilation: 1,
        padding: 0,
    };
    check(
        "conv_transpose2d",
        inputs,
        &move |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), geom).unwrap(),
        12,
    );
}

#[test]
fn maxpool2d() {
    let mut r = rng(4);
    check(
        "maxpool2d",
        vec![separated(&[2, 2, 8, 8], 0.01, &mut r)],
        &|g, v| g.maxpool2d(v[0], 2).unwrap(),
        13,
    );
}

#[test]
fn relu() {
    let mut r = rng(5);
    check("relu", vec![separated(&[1, 2, 6, 6], 0.05, &mut r)], &|g, v| g.relu(v[0]), 14);
}

#[test]
fn sigmoid() {
    let mut r = rng(6);
    check("sigmoid", vec![uniform(&[1, 1, 8, 8], -4.0, 4.0, &mut r)], &|g, v| g.sigmoid(v[0]), 15);
}

#[test]
fn concat_add_scale() {
    let mut r = rng(7);
    let inputs = vec![
        uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r),
        uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r),
        uniform(&[1, 5, 4, 4], -1.0, 1.0, &mut r),
    ];
    check(
        "concat/add/scale",
        inputs,
        &|g, v| {
            let c = g.concat_channels(v[0], v[1]).unwrap();
            let s = g.scale(v[2], -1.7);
            g.add(c, s).unwrap()
        },
        16,
    );
}

#[test]
fn broadcast_mul() {
    let mut r = rng(8);
    let inputs = vec![uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut r), uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut r)];
    check("broadcast_mul", inputs, &|g, v| g.broadcast_mul(v[0], v[1]).unwrap(), 17);
}

#[test]
fn dice_and_cross_entropy() {
    let mut r = rng(9);
    let target = binary(&[2, 1, 6, 6], 0.4, &mut r);
    let t2 = target.clone();
    let prob = uniform(&[2, 1, 6, 6], 0.2, 0.8, &mut r);
    check(
        "dice_loss",
        vec![prob.clone()],
        &move |g, v| g.dice_loss(v[0], &target, 1.0).unwrap(),
        18,
    );
    check(
        "cross_entropy",
        vec![prob],
        &move |g, v| g.cross_entropy(v[0], &t2, 1e-7).unwrap(),
        19,
    );
}

#[test]
fn spatial_attention_block() {
    let mut r = rng(10);
    let sa = SpatialAttention::new(SaConfig::new(16), 3).unwrap();
    let x = uniform(&[1, 16, 8, 8], -1.0, 1.0, &mut r);
    let (analytic, value) = {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let (map, _) = sa.forward(&mut g, xv).unwrap();
        let gated = g.broadcast_mul(xv, map).unwrap();
        let loss = g.sum(gated);
        g.backward(loss).unwrap();
        (g.grad(xv).unwrap().to_vec(), g.value(loss).item().unwrap())
    };
    assert!(value.is_finite());
    let mut worst: f64 = 0.0;
    for i in sample_indices(x.len(), 60, &mut r) {
        let numeric = central_diff(&mut x.clone(), i, &mut |t| {
            let mut g = Graph::new();
            let xv = g.input(t.clone());
            let (map, _) = sa.forward(&mut g, xv).unwrap();
            let gated = g.broadcast_mul(xv, map).unwrap();
            let loss = g.sum(gated);
            g.value(loss).item().unwrap()
        });
        let err = rel_err(analytic[i], numeric);
        worst = worst.max(err);
        assert!(err < FD_TOL, "sa coord {i}: analytic {} numeric {numeric}", analytic[i]);
    }
    eprintln!("spatial attention: worst relative error {worst:.2e}");
}

fn model_loss(model: &Model, master: &Tensor, assistant: &Tensor, label: &Tensor) -> (f64, Vec<usize>) {
    let mut g = Graph::new();
    let m = g.input(master.clone());
    let a = g.input(assistant.clone());
    let out = model.forward(&mut g, m, Some(a)).unwrap();
    let loss = combined_loss(&mut g, out.prob, label, &LossConfig::default()).unwrap();
    (g.value(loss).item().unwrap(), g.piecewise_signature())
}

/// Coordinates whose stencil `[x - h, x + h]` leaves every relu, pooling
/// window and clamp on one branch are checked at `h = 1e-3`; the others
/// are not differentiable across the stencil and are only counted.
#[test]
fn proposed_model_end_to_end() {
    let spec = ModelSpec::with_base_width(Variant::Proposed, 8);
    let mut model = Model::build(&spec, 21).unwrap();
    let mut r = rng(22);
    let master = uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut r);
    let assistant = uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut r);
    let label = binary(&[1, 1, 32, 32], 0.3, &mut r);
    let grads: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let m = g.input(master.clone());
        let a = g.input(assistant.clone());
        let out = model.forward(&mut g, m, Some(a)).unwrap();
        let loss = combined_loss(&mut g, out.prob, &label, &LossConfig::default()).unwrap();
        g.backward(loss).unwrap();
        out.params.iter().map(|&p| g.grad(p).unwrap().to_vec()).collect()
    };
    let base_sig = model_loss(&model, &master, &assistant, &label).1;
    let n_tensors = model.params().len();
    let (mut checked, mut crossing) = (0, 0);
    let mut worst: f64 = 0.0;
    for k in 0..n_tensors {
        let len = model.params().tensors()[k].len();
        for i in sample_indices(len, 2, &mut r) {
            let name = model.params().names()[k].clone();
            let orig = model.params().tensors()[k].data()[i];
            let mut at = |v: f64| {
                model.params_mut().tensors_mut()[k].data_mut()[i] = v;
                model_loss(&model, &master, &assistant, &label)
            };
            let (up, up_sig) = at(orig + FD_STEP);
            let (down, down_sig) = at(orig - FD_STEP);
            let analytic = grads[k][i];
            if up_sig == base_sig && down_sig == base_sig {
                let numeric = (up - down) / (2.0 * FD_STEP);
                let err = rel_err(analytic, numeric);
                worst = worst.max(err);
                assert!(err < FD_TOL, "{name}[{i}]: analytic {analytic} numeric {numeric}");
                checked += 1;
            } else {
                crossing += 1;
            }
            model.params_mut().tensors_mut()[k].data_mut()[i] = orig;
        }
    }
    assert!(checked >= 50, "only {checked} smooth coordinates ({crossing} crossed a branch)");
    eprintln!("proposed: {checked} coordinates at h = 1e-3, worst relative error {worst:.2e}; {crossing} crossed a branch");
}
