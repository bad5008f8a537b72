//! Layers built from named parameters: convolution and normalization.

use ndarray::{Axis, Zip};

use crate::params::Bound;
use crate::tensor::{Array, Conv2dSpec, Tape, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Whether normalization layers use batch statistics (and record running
/// averages) or their stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution with `{prefix}.weight` and, if present, `{prefix}.bias`.
pub fn conv(p: &Bound, prefix: &str, x: &Var, spec: Conv2dSpec) -> Var {
    let bias_name = format!("{prefix}.bias");
    let bias = p.has(&bias_name).then(|| p.var(&bias_name));
    p.tape().conv2d(x, p.var(&format!("{prefix}.weight")), bias, spec)
}

/// `(x − μ) / sqrt(σ² + eps)` with statistics over `axes`, fused so the
/// backward pass needs only the normalized output.
fn standardize(tape: &Tape, x: &Var, axes: &[usize]) -> (Var, Array, Array) {
    let v = x.value();
    let count: usize = axes.iter().map(|&a| v.shape()[a]).product();
    let reduce = |a: &Array| {
        let mut r = a.clone();
        for &ax in axes {
            r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        r / count as f64
    };
    let mean = reduce(v);
    let centered = v - &mean;
    let var = reduce(&centered.mapv(|c| c * c));
    let inv_std = var.mapv(|s| 1.0 / (s + NORM_EPS).sqrt());
    let out = &centered * &inv_std;
    let xhat = std::rc::Rc::new(out.clone());
    let axes = axes.to_vec();
    let inv = inv_std.clone();
    let y = tape.record(out, &[x], move |g, _| {
        // dx = inv_std · (g − mean(g) − x̂ · mean(g · x̂))
        let reduce = |a: &Array| {
            let mut r = a.clone();
            for &ax in &axes {
                r = r.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            }
            r / count as f64
        };
        let mg = reduce(g);
        let mgx = reduce(&(g * &*xhat));
        let mut dx = g - &mg;
        Zip::from(&mut dx)
            .and(&*xhat)
            .and_broadcast(&mgx)
            .and_broadcast(&inv)
            .for_each(|d, &xh, &m, &s| *d = (*d - xh * m) * s);
        vec![Some(dx)]
    });
    (y, mean, var)
}

fn affine(p: &Bound, prefix: &str, x: &Var) -> Var {
    let t = p.tape();
    let scaled = t.mul(x, p.var(&format!("{prefix}.gamma")));
    t.add(&scaled, p.var(&format!("{prefix}.beta")))
}

/// Batch normalization over `(B, H, W)` per channel. In training mode the
/// updated running statistics are queued on `p`.
pub fn batch_norm(p: &Bound, prefix: &str, x: &Var, mode: Mode) -> Var {
    let t = p.tape();
    let normalized = match mode {
        Mode::Train => {
            let (y, mean, var) = standardize(t, x, &[0, 2, 3]);
            let [b, _, h, w] = x.shape();
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var };
            let rm_name = format!("{prefix}.running_mean");
            let rv_name = format!("{prefix}.running_var");
            let rm = p.var(&rm_name).value() * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
            let rv = p.var(&rv_name).value() * (1.0 - BN_MOMENTUM) + &unbiased * BN_MOMENTUM;
            p.record_update(rm_name, rm);
            p.record_update(rv_name, rv);
            y
        }
        Mode::Eval => {
            let mean = p.var(&format!("{prefix}.running_mean")).value();
            let var = p.var(&format!("{prefix}.running_var")).value();
            let inv = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
            let shift = Var::constant(-(mean * &inv));
            t.add(&t.mul(x, &Var::constant(inv)), &shift)
        }
    };
    affine(p, prefix, &normalized)
}

/// Per-sample, per-channel normalization over `(H, W)` with affine
/// parameters and no running statistics.
pub fn instance_norm(p: &Bound, prefix: &str, x: &Var) -> Var {
    let (y, _, _) = standardize(p.tape(), x, &[2, 3]);
    affine(p, prefix, &y)
}
