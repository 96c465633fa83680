//! Central finite-difference oracle for every analytic backward pass.
//!
//! Each checked op is reduced to a scalar function `f(inputs) = Σ r ⊙ op(inputs)`
//! with a fixed random projection `r`; the analytic gradient is the op's
//! backward pass fed with `r`. Inputs are drawn from `[-1, 1]` and resampled
//! until no relu input sits within `1e-3` of zero and no pooled pair lies
//! within `1e-3` of each other.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    build_descriptor, build_descriptor_bwd, clocal_backward, clocal_forward, combine_stage1, combine_stage1_bwd,
    gate_and_scale, gate_and_scale_bwd, se_backward, se_forward, strand_conv_stage2, strand_conv_stage2_bwd,
    CLocalParams, ChannelDescriptor, SEParams, ShapeRule,
};
use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_infer, batchnorm_infer_bwd, batchnorm_train, batchnorm_train_bwd, conv2d_bwd, conv2d_fwd, dense_bwd,
    dense_fwd, global_avg_pool, global_avg_pool_bwd, maxpool2x2, maxpool2x2_bwd, relu, relu_bwd, sigmoid_bwd,
    sigmoid_fwd, softmax, softmax_bwd, softmax_cross_entropy, BatchNormParams, ConvParams, DenseParams, Padding,
};
use crate::params::Parameterized;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Standard-precision backward vs wide-precision backward.
pub const PRECISION_TOL: f64 = 1e-3;
const TIE_MARGIN: f64 = 1e-3;

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite);
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a − n| / max(1, |a|, |n|)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: String,
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
    pub passed: bool,
}

impl GradReport {
    /// Compares named `(analytic, numeric)` gradient pairs.
    pub fn compare(op: &str, pairs: &[(&str, &[f64], &[f64])], tol: f64) -> Self {
        let mut max_rel_err = 0.0;
        let mut worst = None;
        let mut ok = true;
        for (name, analytic, numeric) in pairs {
            if analytic.len() != numeric.len() {
                ok = false;
                continue;
            }
            for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
                let e = rel_error(a, n);
                if !e.is_finite() {
                    ok = false;
                }
                if e > max_rel_err || worst.is_none() {
                    max_rel_err = e;
                    worst = Some((name.to_string(), i));
                }
            }
        }
        Self {
            op: op.to_string(),
            max_rel_err,
            worst,
            tol,
            passed: ok && max_rel_err < tol,
        }
    }

    fn failed(op: &str, tol: f64) -> Self {
        Self {
            op: op.to_string(),
            max_rel_err: f64::INFINITY,
            worst: None,
            tol,
            passed: false,
        }
    }
}

/// Fixed-column table, one row per report.
pub fn format_report_table(reports: &[GradReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<22} {:>12} {:>10}  {:<18} result", "op", "max_rel_err", "tol", "worst");
    for r in reports {
        let worst = r.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<22} {:>12.3e} {:>10.1e}  {:<18} {}",
            r.op,
            r.max_rel_err,
            r.tol,
            worst,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckOp {
    Conv2d,
    Conv2dEvenKernel,
    Conv2dStride2,
    MaxPool,
    BatchNormTrain,
    BatchNormInfer,
    Dense,
    Relu,
    Sigmoid,
    Softmax,
    SoftmaxCrossEntropy,
    GlobalAvgPool,
    Descriptor,
    CombineStage1,
    StrandConv,
    GateScale,
    CLocal,
    SE,
}

impl CheckOp {
    pub const ALL: [CheckOp; 18] = [
        CheckOp::Conv2d,
        CheckOp::Conv2dEvenKernel,
        CheckOp::Conv2dStride2,
        CheckOp::MaxPool,
        CheckOp::BatchNormTrain,
        CheckOp::BatchNormInfer,
        CheckOp::Dense,
        CheckOp::Relu,
        CheckOp::Sigmoid,
        CheckOp::Softmax,
        CheckOp::SoftmaxCrossEntropy,
        CheckOp::GlobalAvgPool,
        CheckOp::Descriptor,
        CheckOp::CombineStage1,
        CheckOp::StrandConv,
        CheckOp::GateScale,
        CheckOp::CLocal,
        CheckOp::SE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckOp::Conv2d => "conv2d",
            CheckOp::Conv2dEvenKernel => "conv2d_even",
            CheckOp::Conv2dStride2 => "conv2d_stride2",
            CheckOp::MaxPool => "maxpool2x2",
            CheckOp::BatchNormTrain => "batchnorm_train",
            CheckOp::BatchNormInfer => "batchnorm_infer",
            CheckOp::Dense => "dense",
            CheckOp::Relu => "relu",
            CheckOp::Sigmoid => "sigmoid",
            CheckOp::Softmax => "softmax",
            CheckOp::SoftmaxCrossEntropy => "softmax_xent",
            CheckOp::GlobalAvgPool => "global_avg_pool",
            CheckOp::Descriptor => "descriptor",
            CheckOp::CombineStage1 => "combine_stage1",
            CheckOp::StrandConv => "strand_conv_stage2",
            CheckOp::GateScale => "gate_and_scale",
            CheckOp::CLocal => "clocal_block",
            CheckOp::SE => "se_block",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }
}

type LossFn<T> = Box<dyn Fn(&[Vec<f64>]) -> Result<T>>;
type GradFn<T> = Box<dyn Fn(&[Vec<f64>]) -> Result<Vec<Vec<T>>>>;

/// A scalar-valued view of one op: named inputs, the projected loss and its
/// analytic gradient, evaluated in precision `T`.
struct Case<T> {
    names: Vec<&'static str>,
    values: Vec<Vec<f64>>,
    loss: LossFn<T>,
    grads: GradFn<T>,
}

fn uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor<T: Scalar>(shape: Shape4, v: &[f64]) -> Tensor4<T> {
    Tensor4::from_vec(shape, v.iter().map(|&x| T::lit(x)).collect()).expect("case shape")
}

fn lit<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn wide<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn project<T: Scalar>(y: &[T], r: &[f64]) -> T {
    y.iter().zip(r).map(|(&a, &b)| a * T::lit(b)).sum()
}

/// Every value at least `TIE_MARGIN` away from zero.
fn resample_away_from_zero(rng: &mut ChaCha8Rng, v: &mut [f64]) {
    for x in v.iter_mut() {
        while x.abs() < TIE_MARGIN {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
}

/// Top two values of a group differ by at least `TIE_MARGIN`.
fn clear_max(group: &[f64]) -> bool {
    let mut sorted = group.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.len() < 2 || sorted[0] - sorted[1] >= TIE_MARGIN
}

/// Pairwise separation of every value in a group.
fn separated(group: &[f64]) -> bool {
    let mut sorted = group.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted.windows(2).all(|w| w[1] - w[0] >= TIE_MARGIN)
}

fn tie_free_planes(rng: &mut ChaCha8Rng, shape: Shape4) -> Vec<f64> {
    loop {
        let v = uniform(rng, shape.len());
        if v.chunks_exact(shape.plane()).all(clear_max) {
            return v;
        }
    }
}

fn conv_case<T: Scalar>(rng: &mut ChaCha8Rng, xs: Shape4, ws: Shape4, stride: usize) -> Case<T> {
    let x = uniform(rng, xs.len());
    let w = uniform(rng, ws.len());
    let b = uniform(rng, ws.n);
    let make = move |v: &[Vec<f64>]| {
        let p = ConvParams::new(tensor::<T>(ws, &v[1]), lit(&v[2]), stride, Padding::Same)?;
        Ok::<_, Error>((tensor::<T>(xs, &v[0]), p))
    };
    let out = ConvParams::<T>::new(Tensor4::zeros(ws), vec![T::zero(); ws.n], stride, Padding::Same)
        .and_then(|p| p.output_shape(xs))
        .expect("conv case geometry");
    let r = uniform(rng, out.len());
    let r2 = r.clone();
    Case {
        names: vec!["x", "weight", "bias"],
        values: vec![x, w, b],
        loss: Box::new(move |v| {
            let (x, p) = make(v)?;
            Ok(project(conv2d_fwd(&x, &p)?.data(), &r))
        }),
        grads: Box::new(move |v| {
            let (x, p) = make(v)?;
            let g = conv2d_bwd(&x, &p, &tensor(out, &r2))?;
            Ok(vec![g.input.into_vec(), g.weight.into_vec(), g.bias])
        }),
    }
}

fn maxpool_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Case<T> {
    let xs = Shape4::new(1, 2, 4, 4);
    let x = loop {
        let v = uniform(rng, xs.len());
        let t = tensor::<f64>(xs, &v);
        let windows_ok = (0..2).all(|c| {
            (0..2).all(|wy| {
                (0..2).all(|wx| {
                    let g: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| t[[0, c, 2 * wy + dy, 2 * wx + dx]])
                        .collect();
                    separated(&g)
                })
            })
        });
        if windows_ok {
            break v;
        }
    };
    let r = uniform(rng, xs.len() / 4);
    let r2 = r.clone();
    Case {
        names: vec!["x"],
        values: vec![x],
        loss: Box::new(move |v| Ok(project(maxpool2x2(&tensor::<T>(xs, &v[0]))?.0.data(), &r))),
        grads: Box::new(move |v| {
            let x = tensor::<T>(xs, &v[0]);
            let (y, idx) = maxpool2x2(&x)?;
            Ok(vec![maxpool2x2_bwd(xs, &idx, &tensor(y.shape(), &r2))?.into_vec()])
        }),
    }
}

fn batchnorm_case<T: Scalar>(rng: &mut ChaCha8Rng, train: bool) -> Case<T> {
    let xs = Shape4::new(3, 2, 3, 3);
    let x = uniform(rng, xs.len());
    let gamma = uniform(rng, 2);
    let beta = uniform(rng, 2);
    let mean = uniform(rng, 2);
    let var: Vec<f64> = (0..2).map(|_| rng.gen_range(0.5..2.0)).collect();
    let r = uniform(rng, xs.len());
    let r2 = r.clone();
    let make = move |v: &[Vec<f64>]| {
        let mut p = BatchNormParams::<T>::new(2);
        p.gamma = lit(&v[1]);
        p.beta = lit(&v[2]);
        p.running_mean = lit(&mean);
        p.running_var = lit(&var);
        (tensor::<T>(xs, &v[0]), p)
    };
    let make2 = make.clone();
    Case {
        names: vec!["x", "gamma", "beta"],
        values: vec![x, gamma, beta],
        loss: Box::new(move |v| {
            let (x, mut p) = make(v);
            let y = if train { batchnorm_train(&x, &mut p)?.0 } else { batchnorm_infer(&x, &p)? };
            Ok(project(y.data(), &r))
        }),
        grads: Box::new(move |v| {
            let (x, mut p) = make2(v);
            let go = tensor(xs, &r2);
            let g = if train {
                let (_, cache) = batchnorm_train(&x, &mut p)?;
                batchnorm_train_bwd(&cache, &p, &go)?
            } else {
                batchnorm_infer_bwd(&x, &p, &go)?
            };
            Ok(vec![g.input.into_vec(), g.gamma, g.beta])
        }),
    }
}

fn dense_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Case<T> {
    let (n, fin, fout) = (3, 5, 4);
    let xs = Shape4::new(n, fin, 1, 1);
    let x = uniform(rng, n * fin);
    let w = uniform(rng, fin * fout);
    let b = uniform(rng, fout);
    let r = uniform(rng, n * fout);
    let r2 = r.clone();
    let make = move |v: &[Vec<f64>]| {
        let p = DenseParams::new(lit::<T>(&v[1]), lit(&v[2]), fin, fout)?;
        Ok::<_, Error>((tensor::<T>(xs, &v[0]), p))
    };
    Case {
        names: vec!["x", "weight", "bias"],
        values: vec![x, w, b],
        loss: Box::new(move |v| {
            let (x, p) = make(v)?;
            Ok(project(dense_fwd(&x, &p)?.data(), &r))
        }),
        grads: Box::new(move |v| {
            let (x, p) = make(v)?;
            let g = dense_bwd(&x, &p, &tensor(Shape4::new(n, fout, 1, 1), &r2))?;
            Ok(vec![g.input.into_vec(), g.weight, g.bias])
        }),
    }
}

fn pointwise_case<T: Scalar>(rng: &mut ChaCha8Rng, op: CheckOp) -> Case<T> {
    let xs = Shape4::new(2, 4, 2, 2);
    let mut x = uniform(rng, xs.len());
    if op == CheckOp::Relu {
        resample_away_from_zero(rng, &mut x);
    }
    let out_shape = if op == CheckOp::GlobalAvgPool { Shape4::new(2, 4, 1, 1) } else { xs };
    let r = uniform(rng, out_shape.len());
    let r2 = r.clone();
    let fwd = move |x: &Tensor4<T>| match op {
        CheckOp::Relu => relu(x),
        CheckOp::Sigmoid => sigmoid_fwd(x),
        CheckOp::Softmax => softmax(x),
        _ => global_avg_pool(x),
    };
    Case {
        names: vec!["x"],
        values: vec![x],
        loss: Box::new(move |v| Ok(project(fwd(&tensor::<T>(xs, &v[0])).data(), &r))),
        grads: Box::new(move |v| {
            let x = tensor::<T>(xs, &v[0]);
            let go = tensor(out_shape, &r2);
            let g = match op {
                CheckOp::Relu => relu_bwd(&x, &go)?,
                CheckOp::Sigmoid => sigmoid_bwd(&sigmoid_fwd(&x), &go)?,
                CheckOp::Softmax => softmax_bwd(&softmax(&x), &go)?,
                _ => global_avg_pool_bwd(xs, &go)?,
            };
            Ok(vec![g.into_vec()])
        }),
    }
}

fn xent_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Case<T> {
    let (n, k) = (3, 10);
    let logits: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let labels2 = labels.clone();
    Case {
        names: vec!["logits"],
        values: vec![logits],
        loss: Box::new(move |v| {
            let z = lit::<T>(&v[0]);
            let mut total = T::zero();
            for (row, &l) in z.chunks_exact(k).zip(&labels) {
                total += softmax_cross_entropy(row, l)?.0;
            }
            Ok(total)
        }),
        grads: Box::new(move |v| {
            let z = lit::<T>(&v[0]);
            let mut g = Vec::with_capacity(z.len());
            for (row, &l) in z.chunks_exact(k).zip(&labels2) {
                g.extend(softmax_cross_entropy(row, l)?.1);
            }
            Ok(vec![g])
        }),
    }
}

fn descriptor_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Case<T> {
    let xs = Shape4::new(2, 4, 3, 3);
    let x = tie_free_planes(rng, xs);
    let r = uniform(rng, 2 * 2 * 4);
    let r2 = r.clone();
    Case {
        names: vec!["x"],
        values: vec![x],
        loss: Box::new(move |v| Ok(project(build_descriptor(&tensor::<T>(xs, &v[0])).data(), &r))),
        grads: Box::new(move |v| {
            let x = tensor::<T>(xs, &v[0]);
            let d = build_descriptor(&x);
            let g = ChannelDescriptor::from_rows(2, 4, lit(&r2));
            Ok(vec![build_descriptor_bwd(xs, &d, &g)?.into_vec()])
        }),
    }
}

fn stage1_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Case<T> {
    let (n, c, f) = (2, 8, 3);
    let d = uniform(rng, n * 2 * c);
    let w = uniform(rng, 2 * f);
    let b = uniform(rng, f);
    let r = uniform(rng, n * c * f);
    let r2 = r.clone();
    Case {
        names: vec!["descriptor", "stage1_w", "stage1_b"],
        values: vec![d, w, b],
        loss: Box::new(move |v| {
            let d = ChannelDescriptor::from_rows(n, c, lit::<T>(&v[0]));
            Ok(project(combine_stage1(&d, &lit::<T>(&v[1]), &lit::<T>(&v[2]))?.data(), &r))
        }),
        grads: Box::new(move |v| {
            let d = ChannelDescriptor::from_rows(n, c, lit::<T>(&v[0]));
            let g = combine_stage1_bwd(&d, &lit::<T>(&v[1]), &tensor(Shape4::new(n, 1, c, f), &r2))?;
            Ok(vec![g.descriptor.data().to_vec(), g.weight, g.bias])
        }),
    }
}

fn strand_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Case<T> {
    let (n, c, f, l) = (2, 8, 3, 4);
    let ms = Shape4::new(n, 1, c, f);
    let m = uniform(rng, ms.len());
    let w = uniform(rng, l * f);
    let b = uniform(rng, 1);
    let r = uniform(rng, n * c);
    let r2 = r.clone();
    Case {
        names: vec!["map", "stage2_w", "stage2_b"],
        values: vec![m, w, b],
        loss: Box::new(move |v| {
            let z = strand_conv_stage2(&tensor::<T>(ms, &v[0]), &lit::<T>(&v[1]), T::lit(v[2][0]))?;
            Ok(project(z.data(), &r))
        }),
        grads: Box::new(move |v| {
            let g = strand_conv_stage2_bwd(
                &tensor::<T>(ms, &v[0]),
                &lit::<T>(&v[1]),
                &tensor(Shape4::new(n, c, 1, 1), &r2),
            )?;
            Ok(vec![g.map.into_vec(), g.weight, vec![g.bias]])
        }),
    }
}

fn gate_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Case<T> {
    let xs = Shape4::new(2, 4, 3, 3);
    let gs = Shape4::new(2, 4, 1, 1);
    let x = uniform(rng, xs.len());
    let z: Vec<f64> = (0..gs.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let r = uniform(rng, xs.len());
    let r2 = r.clone();
    Case {
        names: vec!["x", "pre_gate"],
        values: vec![x, z],
        loss: Box::new(move |v| Ok(project(gate_and_scale(&tensor::<T>(xs, &v[0]), &tensor(gs, &v[1]))?.data(), &r))),
        grads: Box::new(move |v| {
            let (dx, dz) = gate_and_scale_bwd(&tensor::<T>(xs, &v[0]), &tensor(gs, &v[1]), &tensor(xs, &r2))?;
            Ok(vec![dx.into_vec(), dz.into_vec()])
        }),
    }
}

fn params_from<T: Scalar, P: Parameterized<T>>(p: &mut P, v: &[Vec<f64>]) {
    for (slot, vals) in p.params_mut().into_iter().zip(v) {
        for (d, &s) in slot.data.iter_mut().zip(vals) {
            *d = T::lit(s);
        }
    }
}

fn param_values<T: Scalar, P: Parameterized<T>>(p: &P) -> Vec<Vec<f64>> {
    p.params().iter().map(|s| wide(s.data)).collect()
}

fn clocal_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Case<T> {
    let xs = Shape4::new(2, 32, 4, 4);
    let x = tie_free_planes(rng, xs);
    let mut p = CLocalParams::<f64>::he_normal(32, ShapeRule::default(), rng).expect("C=32");
    for b in p.stage1_b.iter_mut().chain(&mut p.stage2_b) {
        *b = rng.gen_range(-0.5..0.5);
    }
    let mut values = vec![x];
    values.extend(param_values(&p));
    let r = uniform(rng, xs.len());
    let r2 = r.clone();
    let make = move |v: &[Vec<f64>]| {
        let mut p = CLocalParams::<T>::zeros(32, ShapeRule::default()).expect("C=32");
        params_from(&mut p, &v[1..]);
        (tensor::<T>(xs, &v[0]), p)
    };
    let make2 = make;
    Case {
        names: vec!["x", "stage1_w", "stage1_b", "stage2_w", "stage2_b"],
        values,
        loss: Box::new(move |v| {
            let (x, p) = make(v);
            Ok(project(clocal_forward(&x, &p)?.data(), &r))
        }),
        grads: Box::new(move |v| {
            let (x, p) = make2(v);
            let (dx, g) = clocal_backward(&x, &p, &tensor(xs, &r2))?;
            let mut out = vec![dx.into_vec()];
            out.extend(g.params().iter().map(|s| s.data.to_vec()));
            Ok(out)
        }),
    }
}

fn se_case<T: Scalar>(rng: &mut ChaCha8Rng) -> Case<T> {
    let xs = Shape4::new(2, 32, 4, 4);
    let (x, p) = loop {
        let x = uniform(rng, xs.len());
        let mut p = SEParams::<f64>::he_normal(32, rng).expect("C=32");
        for b in p.b1.iter_mut().chain(&mut p.b2) {
            *b = rng.gen_range(-0.5..0.5);
        }
        let hidden = p.hidden_activations(&tensor(xs, &x)).expect("se shapes");
        if hidden.iter().all(|h| h.abs() >= TIE_MARGIN) {
            break (x, p);
        }
    };
    let mut values = vec![x];
    values.extend(param_values(&p));
    let r = uniform(rng, xs.len());
    let r2 = r.clone();
    let make = move |v: &[Vec<f64>]| {
        let mut p = SEParams::<T>::zeros(32).expect("C=32");
        params_from(&mut p, &v[1..]);
        (tensor::<T>(xs, &v[0]), p)
    };
    let make2 = make;
    Case {
        names: vec!["x", "w1", "b1", "w2", "b2"],
        values,
        loss: Box::new(move |v| {
            let (x, p) = make(v);
            Ok(project(se_forward(&x, &p)?.data(), &r))
        }),
        grads: Box::new(move |v| {
            let (x, p) = make2(v);
            let (dx, g) = se_backward(&x, &p, &tensor(xs, &r2))?;
            let mut out = vec![dx.into_vec()];
            out.extend(g.params().iter().map(|s| s.data.to_vec()));
            Ok(out)
        }),
    }
}

fn case_rng(op: CheckOp, seed: u64) -> ChaCha8Rng {
    let tag = CheckOp::ALL.iter().position(|&o| o == op).unwrap_or(0) as u64;
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 32))
}

fn build_case<T: Scalar>(op: CheckOp, seed: u64) -> Case<T> {
    let rng = &mut case_rng(op, seed);
    match op {
        CheckOp::Conv2d => conv_case(rng, Shape4::new(1, 2, 4, 4), Shape4::new(3, 2, 3, 3), 1),
        CheckOp::Conv2dEvenKernel => conv_case(rng, Shape4::new(2, 2, 4, 4), Shape4::new(2, 2, 2, 2), 1),
        CheckOp::Conv2dStride2 => conv_case(rng, Shape4::new(1, 2, 5, 5), Shape4::new(2, 2, 3, 3), 2),
        CheckOp::MaxPool => maxpool_case(rng),
        CheckOp::BatchNormTrain => batchnorm_case(rng, true),
        CheckOp::BatchNormInfer => batchnorm_case(rng, false),
        CheckOp::Dense => dense_case(rng),
        CheckOp::Relu | CheckOp::Sigmoid | CheckOp::Softmax | CheckOp::GlobalAvgPool => pointwise_case(rng, op),
        CheckOp::SoftmaxCrossEntropy => xent_case(rng),
        CheckOp::Descriptor => descriptor_case(rng),
        CheckOp::CombineStage1 => stage1_case(rng),
        CheckOp::StrandConv => strand_case(rng),
        CheckOp::GateScale => gate_case(rng),
        CheckOp::CLocal => clocal_case(rng),
        CheckOp::SE => se_case(rng),
    }
}

/// Analytic vs finite-difference gradients for `op` in wide precision.
pub fn check_op(op: CheckOp, seed: u64, tol: f64) -> GradReport {
    check_op_with(op, seed, tol, |_| {})
}

/// Like [`check_op`], but lets the caller alter the analytic gradients
/// before comparison (negative controls).
pub fn check_op_with(op: CheckOp, seed: u64, tol: f64, tamper: impl Fn(&mut [Vec<f64>])) -> GradReport {
    let case = build_case::<f64>(op, seed);
    let Ok(mut analytic) = (case.grads)(&case.values) else {
        return GradReport::failed(op.name(), tol);
    };
    tamper(&mut analytic);
    let mut numeric = Vec::with_capacity(case.values.len());
    for i in 0..case.values.len() {
        let mut inputs = case.values.clone();
        let f = |probe: &[f64]| {
            inputs[i].copy_from_slice(probe);
            (case.loss)(&inputs).unwrap_or(f64::NAN)
        };
        match finite_diff(f, &case.values[i], DEFAULT_STEP) {
            Ok(g) => numeric.push(g),
            Err(_) => return GradReport::failed(op.name(), tol),
        }
    }
    let pairs: Vec<(&str, &[f64], &[f64])> = case
        .names
        .iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(&n, (a, b))| (n, a.as_slice(), b.as_slice()))
        .collect();
    GradReport::compare(op.name(), &pairs, tol)
}

/// Standard-precision (`f32`) analytic gradients against the same algorithm
/// in wide precision.
pub fn check_precision(op: CheckOp, seed: u64, tol: f64) -> GradReport {
    let narrow = build_case::<f32>(op, seed);
    let wide_case = build_case::<f64>(op, seed);
    let (Ok(a), Ok(b)) = ((narrow.grads)(&narrow.values), (wide_case.grads)(&wide_case.values)) else {
        return GradReport::failed(op.name(), tol);
    };
    let a: Vec<Vec<f64>> = a.iter().map(|v| wide(v)).collect();
    let pairs: Vec<(&str, &[f64], &[f64])> = narrow
        .names
        .iter()
        .zip(a.iter().zip(&b))
        .map(|(&n, (x, y))| (n, x.as_slice(), y.as_slice()))
        .collect();
    GradReport::compare(&format!("{}[f32]", op.name()), &pairs, tol)
}

/// Runs `ops` over `seeds`, one report per `(op, seed)`.
pub fn run_suite(ops: &[CheckOp], seeds: &[u64], tol: f64) -> Vec<GradReport> {
    ops.iter()
        .flat_map(|&op| {
            seeds.iter().map(move |&s| {
                let mut r = check_op(op, s, tol);
                r.op = format!("{}#{s}", r.op);
                r
            })
        })
        .collect()
}
