//! Self-verification suites: analytic gradients and gradients-of-gradients
//! against central finite differences on random shapes, plus closed-form
//! checks of the evaluation metrics.

use std::fmt;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{depth_metrics, emd_1d, psnr, psnr_from_mse, ssim};
use crate::models::seeded;
use crate::tensor::{finite_difference_gradient, grad, with_grad_mode, Conv2dGeometry, DType, Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Random shapes drawn per op.
    pub shapes_per_op: usize,
    pub seed: u64,
}

impl GradcheckConfig {
    /// Defaults for a precision: 1e-4 at 64 bits, 1e-2 at 32 bits.
    pub fn for_dtype(dtype: DType) -> Self {
        GradcheckConfig {
            tol: match dtype {
                DType::F64 => 1e-4,
                DType::F32 => 1e-2,
            },
            shapes_per_op: 20,
            seed: 0,
        }
    }
}

/// Step for central differences at a precision.
fn fd_step<T: Element>() -> T {
    match T::DTYPE {
        DType::F64 => T::of(1e-6),
        DType::F32 => T::of(1e-2),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<9} {:<22} cases={:<3} max_rel_err={:.3e}",
            if self.passed { "ok  " } else { "FAIL" },
            self.suite,
            self.name,
            self.cases,
            self.max_rel_err
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.results.iter().find(|r| !r.passed)
    }

    pub fn extend(&mut self, other: SuiteReport) {
        self.results.extend(other.results);
    }
}

/// `||a - b|| / max(||a||, ||b||)` with a floor on the denominator, so an
/// all-zero gradient compared against an all-zero estimate scores 0.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let denom = norm(analytic).max(norm(numeric)).max(1e-12);
    if analytic.len() != numeric.len() {
        return f64::INFINITY;
    }
    norm(&diff) / denom
}

type OpFn<T> = Rc<dyn Fn(&[Tensor<T>]) -> Result<Tensor<T>>>;

/// One random instance of an op: its inputs and a closure computing the
/// output from them.
struct Case<T: Element> {
    inputs: Vec<Tensor<T>>,
    op: OpFn<T>,
}

fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| T::of(rng.gen_range(lo..hi))).collect();
    Tensor::from_vec(v, shape).expect("shape and data agree")
}

/// Values in `[lo, hi]` with random sign, away from zero so kinks are never
/// straddled by a finite-difference probe.
fn away_from_zero<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            T::of(s * rng.gen_range(lo..hi))
        })
        .collect();
    Tensor::from_vec(v, shape).expect("shape and data agree")
}

fn uniform_any<T: Element>(rng: &mut ChaCha8Rng, max_rank: usize, max_dim: usize, lo: f64, hi: f64) -> Tensor<T> {
    let s = random_shape(rng, max_rank, max_dim);
    uniform(rng, &s, lo, hi)
}

fn away_any<T: Element>(rng: &mut ChaCha8Rng, max_rank: usize, max_dim: usize, lo: f64, hi: f64) -> Tensor<T> {
    let s = random_shape(rng, max_rank, max_dim);
    away_from_zero(rng, &s, lo, hi)
}

fn random_shape(rng: &mut ChaCha8Rng, max_rank: usize, max_dim: usize) -> Vec<usize> {
    let rank = rng.gen_range(1..=max_rank);
    (0..rank).map(|_| rng.gen_range(1..=max_dim)).collect()
}

/// A shape broadcastable to `shape`: some axes set to 1, some leading axes
/// dropped.
fn broadcast_partner(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<usize> {
    let drop = rng.gen_range(0..shape.len());
    shape[drop..].iter().map(|&d| if rng.gen_bool(0.4) { 1 } else { d }).collect()
}

fn unary<T: Element>(x: Tensor<T>, f: impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'static) -> Case<T> {
    Case { inputs: vec![x], op: Rc::new(move |v| f(&v[0])) }
}

fn binary<T: Element>(a: Tensor<T>, b: Tensor<T>, f: impl Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>> + 'static) -> Case<T> {
    Case { inputs: vec![a, b], op: Rc::new(move |v| f(&v[0], &v[1])) }
}

fn random_conv_geometry(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, Conv2dGeometry) {
    loop {
        let (n, c, o) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(3..=7), rng.gen_range(3..=7));
        let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let geom = Conv2dGeometry {
            stride: (rng.gen_range(1..=2), rng.gen_range(1..=2)),
            padding: (rng.gen_range(0..=2), rng.gen_range(0..=2)),
            dilation: (rng.gen_range(1..=2), rng.gen_range(1..=2)),
        };
        if geom.output_size((h, w), (kh, kw)).is_ok() {
            return (vec![n, c, h, w], vec![o, c, kh, kw], geom);
        }
    }
}

type CaseGen<T> = fn(&mut ChaCha8Rng) -> Case<T>;

/// Every differentiable tensor op with a generator of random instances.
fn op_table<T: Element>() -> Vec<(&'static str, CaseGen<T>)> {
    vec![
        ("add", |r| {
            let s = random_shape(r, 4, 4);
            let b = broadcast_partner(r, &s);
            binary(uniform(r, &s, -1.0, 1.0), uniform(r, &b, -1.0, 1.0), |a, b| a.add(b))
        }),
        ("sub", |r| {
            let s = random_shape(r, 4, 4);
            let b = broadcast_partner(r, &s);
            binary(uniform(r, &b, -1.0, 1.0), uniform(r, &s, -1.0, 1.0), |a, b| a.sub(b))
        }),
        ("mul", |r| {
            let s = random_shape(r, 4, 4);
            let b = broadcast_partner(r, &s);
            binary(uniform(r, &s, -1.0, 1.0), uniform(r, &b, -1.0, 1.0), |a, b| a.mul(b))
        }),
        ("div", |r| {
            let s = random_shape(r, 4, 4);
            let b = broadcast_partner(r, &s);
            binary(uniform(r, &s, -1.0, 1.0), away_from_zero(r, &b, 0.5, 2.0), |a, b| a.div(b))
        }),
        ("pow", |r| {
            let s = random_shape(r, 3, 4);
            let b = broadcast_partner(r, &s);
            binary(uniform(r, &s, 0.5, 2.0), uniform(r, &b, -1.5, 1.5), |a, b| a.pow(b))
        }),
        ("neg", |r| unary(uniform_any(r, 4, 4, -1.0, 1.0), |x| Ok(x.neg()))),
        ("scale", |r| {
            let c = r.gen_range(-2.0..2.0);
            unary(uniform_any(r, 4, 4, -1.0, 1.0), move |x| Ok(x.scale(T::of(c))))
        }),
        ("add_scalar", |r| {
            let c = r.gen_range(-2.0..2.0);
            unary(uniform_any(r, 4, 4, -1.0, 1.0), move |x| Ok(x.add_scalar(T::of(c))))
        }),
        ("abs", |r| unary(away_any(r, 4, 4, 0.1, 1.0), |x| Ok(x.abs()))),
        ("exp", |r| unary(uniform_any(r, 4, 4, -1.0, 1.0), |x| Ok(x.exp()))),
        ("log", |r| unary(uniform_any(r, 4, 4, 0.3, 2.0), |x| x.log())),
        ("sqrt", |r| unary(uniform_any(r, 4, 4, 0.3, 2.0), |x| x.sqrt())),
        ("pow_scalar", |r| {
            let p = r.gen_range(-2.0..3.0);
            unary(uniform_any(r, 4, 4, 0.3, 2.0), move |x| x.pow_scalar(T::of(p)))
        }),
        ("relu", |r| unary(away_any(r, 4, 4, 0.1, 1.0), |x| Ok(x.relu()))),
        ("leaky_relu", |r| unary(away_any(r, 4, 4, 0.1, 1.0), |x| Ok(x.leaky_relu(T::of(0.2))))),
        ("elu", |r| unary(away_any(r, 4, 4, 0.1, 1.5), |x| Ok(x.elu(T::one())))),
        ("tanh", |r| unary(uniform_any(r, 4, 4, -2.0, 2.0), |x| Ok(x.tanh()))),
        ("sigmoid", |r| unary(uniform_any(r, 4, 4, -3.0, 3.0), |x| Ok(x.sigmoid()))),
        ("reshape", |r| {
            let s = random_shape(r, 4, 4);
            let mut flat = vec![s.iter().product::<usize>()];
            if flat[0] % 2 == 0 {
                flat = vec![2, flat[0] / 2];
            }
            unary(uniform(r, &s, -1.0, 1.0), move |x| x.reshape(&flat))
        }),
        ("broadcast_to", |r| {
            let s = random_shape(r, 4, 4);
            let b = broadcast_partner(r, &s);
            unary(uniform(r, &b, -1.0, 1.0), move |x| x.broadcast_to(&s))
        }),
        ("sum_to", |r| {
            let s = random_shape(r, 4, 4);
            let b = broadcast_partner(r, &s);
            unary(uniform(r, &s, -1.0, 1.0), move |x| x.sum_to(&b))
        }),
        ("sum_all", |r| unary(uniform_any(r, 4, 4, -1.0, 1.0), |x| Ok(x.sum_all()))),
        ("mean_all", |r| unary(uniform_any(r, 4, 4, -1.0, 1.0), |x| Ok(x.mean_all()))),
        ("sum_axes", |r| {
            let s = random_shape(r, 4, 4);
            let mut axes: Vec<usize> = (0..s.len()).filter(|_| r.gen_bool(0.5)).collect();
            if axes.is_empty() {
                axes.push(0);
            }
            let keep = r.gen_bool(0.5);
            unary(uniform(r, &s, -1.0, 1.0), move |x| x.sum_axes(&axes, keep))
        }),
        ("mean_axes", |r| {
            let s = random_shape(r, 4, 4);
            let axes = vec![r.gen_range(0..s.len())];
            let keep = r.gen_bool(0.5);
            unary(uniform(r, &s, -1.0, 1.0), move |x| x.mean_axes(&axes, keep))
        }),
        ("cat", |r| {
            let s = random_shape(r, 4, 3);
            let axis = r.gen_range(0..s.len());
            let mut t = s.clone();
            t[axis] = r.gen_range(1..=3);
            binary(uniform(r, &s, -1.0, 1.0), uniform(r, &t, -1.0, 1.0), move |a, b| Tensor::cat(&[a, b], axis))
        }),
        ("narrow", |r| {
            let s = random_shape(r, 4, 4);
            let axis = r.gen_range(0..s.len());
            let start = r.gen_range(0..s[axis]);
            let len = r.gen_range(1..=s[axis] - start);
            unary(uniform(r, &s, -1.0, 1.0), move |x| x.narrow(axis, start, len))
        }),
        ("pad_axis", |r| {
            let s = random_shape(r, 4, 4);
            let axis = r.gen_range(0..s.len());
            let start = r.gen_range(0..3);
            let total = s[axis] + start + r.gen_range(0..3);
            unary(uniform(r, &s, -1.0, 1.0), move |x| x.pad_axis(axis, start, total))
        }),
        ("gather", |r| {
            let s = random_shape(r, 3, 4);
            let n: usize = s.iter().product();
            let m = r.gen_range(1..=2 * n);
            let idx: Rc<Vec<usize>> = Rc::new((0..m).map(|_| r.gen_range(0..n)).collect());
            unary(uniform(r, &s, -1.0, 1.0), move |x| x.gather(Rc::clone(&idx), &[m]))
        }),
        ("scatter_add", |r| {
            let s = random_shape(r, 3, 4);
            let n: usize = s.iter().product();
            let out = r.gen_range(1..=n + 2);
            let idx: Rc<Vec<usize>> = Rc::new((0..n).map(|_| r.gen_range(0..out)).collect());
            unary(uniform(r, &s, -1.0, 1.0), move |x| x.scatter_add(Rc::clone(&idx), &[out]))
        }),
        ("matmul", |r| {
            let (m, k, n) = (r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=5));
            binary(uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0), |a, b| a.matmul(b))
        }),
        ("transpose", |r| {
            let (m, n) = (r.gen_range(1..=5), r.gen_range(1..=5));
            unary(uniform(r, &[m, n], -1.0, 1.0), |x| x.transpose())
        }),
        ("conv2d", |r| {
            let (xs, ws, geom) = random_conv_geometry(r);
            let bias = uniform(r, &[ws[0]], -1.0, 1.0);
            Case {
                inputs: vec![uniform(r, &xs, -1.0, 1.0), uniform(r, &ws, -1.0, 1.0), bias],
                op: Rc::new(move |v| v[0].conv2d(&v[1], Some(&v[2]), geom)),
            }
        }),
        ("conv2d_input_grad", |r| {
            let (xs, ws, geom) = random_conv_geometry(r);
            let (oh, ow) = geom.output_size((xs[2], xs[3]), (ws[2], ws[3])).expect("valid geometry");
            let hw = (xs[2], xs[3]);
            binary(uniform(r, &[xs[0], ws[0], oh, ow], -1.0, 1.0), uniform(r, &ws, -1.0, 1.0), move |g, w| {
                g.conv2d_input_grad(w, geom, hw)
            })
        }),
        ("conv2d_weight_grad", |r| {
            let (xs, ws, geom) = random_conv_geometry(r);
            let (oh, ow) = geom.output_size((xs[2], xs[3]), (ws[2], ws[3])).expect("valid geometry");
            let k = (ws[2], ws[3]);
            binary(uniform(r, &xs, -1.0, 1.0), uniform(r, &[xs[0], ws[0], oh, ow], -1.0, 1.0), move |x, g| {
                x.conv2d_weight_grad(g, geom, k)
            })
        }),
        ("upsample_nearest", |r| {
            let s = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4)];
            let f = r.gen_range(1..=3);
            unary(uniform(r, &s, -1.0, 1.0), move |x| x.upsample_nearest(f))
        }),
        ("downsample_sum", |r| {
            let f = r.gen_range(1..=3);
            let s = [r.gen_range(1..=2), r.gen_range(1..=3), f * r.gen_range(1..=3), f * r.gen_range(1..=3)];
            unary(uniform(r, &s, -1.0, 1.0), move |x| x.downsample_sum(f))
        }),
    ]
}

/// Names of the ops covered by [`gradient_suite`].
pub fn op_names() -> Vec<&'static str> {
    op_table::<f64>().into_iter().map(|(n, _)| n).collect()
}

/// `sum(op(inputs) * r)` for a fixed random `r`, so every output element
/// contributes with a distinct weight.
fn weighted_loss<T: Element>(op: &OpFn<T>, inputs: &[Tensor<T>], weights: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(op(inputs)?.mul(weights)?.sum_all())
}

fn check_case<T: Element>(case: &Case<T>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let out_shape = (case.op)(&case.inputs)?.shape().to_vec();
    let weights: Tensor<T> = uniform(rng, &out_shape, -1.0, 1.0);
    let leaves: Vec<Tensor<T>> = case.inputs.iter().map(|t| t.detach().into_leaf(true)).collect();
    let loss = weighted_loss(&case.op, &leaves, &weights)?;
    let analytic = grad(&loss, &leaves, false)?;
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |x| {
                let mut probe = case.inputs.clone();
                probe[i] = x.clone();
                weighted_loss(&case.op, &probe, &weights)
            },
            &case.inputs[i],
            fd_step::<T>(),
        )?;
        worst = worst.max(relative_error(&a.to_f64_vec(), &numeric.to_f64_vec()));
    }
    Ok(worst)
}

fn record(suite: &'static str, name: &str, errs: Vec<f64>, tol: f64) -> CheckResult {
    let max = errs.iter().cloned().fold(0.0, |m: f64, e| if e.is_nan() { f64::NAN } else { m.max(e) });
    CheckResult {
        suite,
        name: name.to_string(),
        cases: errs.len(),
        max_rel_err: max,
        tol,
        passed: max <= tol,
    }
}

/// First-order check of every op over `shapes_per_op` random instances.
pub fn gradient_suite<T: Element>(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for (k, (name, gen)) in op_table::<T>().into_iter().enumerate() {
        let mut rng = seeded(cfg.seed, 0x6ad0 + k as u64);
        let errs = (0..cfg.shapes_per_op)
            .map(|_| {
                let case = gen(&mut rng);
                check_case(&case, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        report.results.push(record("gradient", name, errs, cfg.tol));
    }
    Ok(report)
}

/// Scalar functions whose gradient is itself differentiated: for each, the
/// gradient of `<grad f(x), v>` is compared with finite differences of the
/// first-order gradient.
fn double_table<T: Element>() -> Vec<(&'static str, CaseGen<T>)> {
    vec![
        ("mul", |r| {
            let s = random_shape(r, 3, 4);
            let c = uniform(r, &s, -1.0, 1.0);
            unary(uniform(r, &s, -1.0, 1.0), move |x| Ok(x.mul(x)?.mul(&c)?.sum_all()))
        }),
        ("div", |r| {
            let s = random_shape(r, 3, 4);
            unary(uniform(r, &s, 0.5, 2.0), |x| Ok(x.add_scalar(T::one()).div(x)?.sum_all()))
        }),
        ("exp_log", |r| {
            let s = random_shape(r, 3, 4);
            unary(uniform(r, &s, 0.5, 2.0), |x| Ok(x.log()?.mul(&x.exp())?.sum_all()))
        }),
        ("sqrt_pow", |r| {
            let s = random_shape(r, 3, 4);
            unary(uniform(r, &s, 0.5, 2.0), |x| Ok(x.sqrt()?.add(&x.pow_scalar(T::of(3.0))?)?.sum_all()))
        }),
        ("tanh_sigmoid", |r| {
            let s = random_shape(r, 3, 4);
            unary(uniform(r, &s, -2.0, 2.0), |x| Ok(x.tanh().mul(&x.sigmoid())?.sum_all()))
        }),
        ("elu", |r| {
            let s = random_shape(r, 3, 4);
            unary(away_from_zero(r, &s, 0.1, 1.5), |x| Ok(x.elu(T::one()).mul(x)?.sum_all()))
        }),
        ("matmul", |r| {
            let (m, k) = (r.gen_range(1..=4), r.gen_range(1..=4));
            let w = uniform(r, &[k, m], -1.0, 1.0);
            unary(uniform(r, &[m, k], -1.0, 1.0), move |x| Ok(x.matmul(&w)?.tanh().sum_all()))
        }),
        ("conv2d_weight", |r| {
            let (xs, ws, geom) = random_conv_geometry(r);
            let x = uniform(r, &xs, -1.0, 1.0);
            unary(uniform(r, &ws, -1.0, 1.0), move |w| {
                let y = x.conv2d(w, None, geom)?;
                Ok(y.mul(&y)?.sum_all())
            })
        }),
        ("conv2d_leaky_penalty", |r| {
            // gradient norm of a tiny leaky-relu conv critic, as in a penalty
            let (xs, ws, geom) = random_conv_geometry(r);
            let x = away_from_zero(r, &xs, 0.1, 1.0);
            unary(uniform(r, &ws, -1.0, 1.0), move |w| {
                let xl = x.detach().into_leaf(true);
                let y = xl.conv2d(w, None, geom)?.tanh().sum_all();
                let g = grad(&y, &[xl], true)?.remove(0);
                Ok(g.mul(&g)?.sum_all())
            })
        }),
        ("upsample_narrow_cat", |r| {
            let s = [1, r.gen_range(1..=2), r.gen_range(2..=4), r.gen_range(2..=4)];
            unary(uniform(r, &s, -1.0, 1.0), |x| {
                let u = x.upsample_nearest(2)?;
                let c = Tensor::cat(&[&u, &x.upsample_nearest(2)?.narrow(1, 0, 1)?], 1)?;
                Ok(c.mul(&c)?.mul(&c)?.sum_all())
            })
        }),
    ]
}

fn check_double<T: Element>(case: &Case<T>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let x0 = &case.inputs[0];
    let v: Tensor<T> = uniform(rng, x0.shape(), -1.0, 1.0);
    // finite differences probe under no_grad; the first-order gradient
    // still needs a graph
    let first = |x: &Tensor<T>| -> Result<Tensor<T>> {
        with_grad_mode(true, || {
            let leaf = x.detach().into_leaf(true);
            let f = (case.op)(std::slice::from_ref(&leaf))?;
            Ok(grad(&f, std::slice::from_ref(&leaf), false)?.remove(0))
        })
    };
    let leaf = x0.detach().into_leaf(true);
    let f = (case.op)(std::slice::from_ref(&leaf))?;
    let g = grad(&f, std::slice::from_ref(&leaf), true)?.remove(0);
    let h = g.mul(&v)?.sum_all();
    let analytic = match grad(&h, std::slice::from_ref(&leaf), false) {
        Ok(mut g) => g.remove(0),
        // a gradient independent of x has zero second derivative
        Err(Error::Disconnected { .. }) => Tensor::zeros(x0.shape()),
        Err(e) => return Err(e),
    };
    let numeric = finite_difference_gradient(|x| Ok(first(x)?.mul(&v)?.sum_all()), x0, fd_step::<T>())?;
    Ok(relative_error(&analytic.to_f64_vec(), &numeric.to_f64_vec()))
}

/// Second-order check: gradients of gradients against finite differences.
pub fn double_backprop_suite<T: Element>(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for (k, (name, gen)) in double_table::<T>().into_iter().enumerate() {
        let mut rng = seeded(cfg.seed, 0xdb0 + k as u64);
        let errs = (0..cfg.shapes_per_op)
            .map(|_| {
                let case = gen(&mut rng);
                check_double(&case, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        report.results.push(record("double", name, errs, cfg.tol));
    }
    Ok(report)
}

/// Minimum over all matchings of the mean absolute difference.
pub fn emd_brute_force(a: &[f64], b: &[f64]) -> f64 {
    fn permute(b: &mut Vec<f64>, k: usize, a: &[f64], best: &mut f64) {
        if k == b.len() {
            let cost = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            *best = best.min(cost);
            return;
        }
        for i in k..b.len() {
            b.swap(k, i);
            permute(b, k + 1, a, best);
            b.swap(k, i);
        }
    }
    let mut best = f64::INFINITY;
    permute(&mut b.to_vec(), 0, a, &mut best);
    best
}

/// Direct 2-D SSIM: an 11x11 Gaussian window evaluated at every valid
/// position, no separable filtering.
pub fn ssim_direct(a: &[f64], b: &[f64], size: usize) -> f64 {
    const WIN: usize = 11;
    let sigma = 1.5f64;
    let mut w = [[0.0f64; WIN]; WIN];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let n = size - WIN + 1;
    for y in 0..n {
        for x in 0..n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..WIN {
                for j in 0..WIN {
                    let k = w[i][j] / total;
                    let (p, q) = (a[(y + i) * size + x + j], b[(y + i) * size + x + j]);
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    acc / (n * n) as f64
}

/// Closed-form and direct-formula checks of the evaluation metrics. Fixed
/// tolerances: 1e-9 for analytic cases, 1e-6 for direct evaluations, exact
/// agreement (to rounding) for the earth-mover brute force.
pub fn metric_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = seeded(seed, 0x3e7);
    let mut report = SuiteReport::default();
    let mut push = |name: &str, err: f64, tol: f64| {
        report.results.push(CheckResult {
            suite: "metric",
            name: name.to_string(),
            cases: 1,
            max_rel_err: err,
            tol,
            passed: err <= tol,
        });
    };

    push("psnr_analytic", (psnr_from_mse(0.01, 1.0)? - 20.0).abs(), 1e-9);
    let a: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b: Vec<f64> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 48.0;
    push("psnr_direct", (psnr(&a, &b, 48, 1.0, None)? - 10.0 * (1.0 / mse).log10()).abs(), 1e-9);

    let d = depth_metrics(&[4.0; 16], &[2.0; 16], 1e-3, None)?;
    let err = [(d.abs_rel, 1.0), (d.sq_rel, 2.0), (d.rmse, 2.0), (d.rmse_log, 2f64.ln())]
        .iter()
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);
    push("depth_analytic", err, 1e-9);
    let p: Vec<f64> = (0..64).map(|_| rng.gen_range(0.5..8.0)).collect();
    let g: Vec<f64> = (0..64).map(|_| rng.gen_range(0.5..8.0)).collect();
    let d = depth_metrics(&p, &g, 1e-3, None)?;
    let n = 64.0;
    let want = [
        p.iter().zip(&g).map(|(p, g)| (p - g).abs() / g).sum::<f64>() / n,
        p.iter().zip(&g).map(|(p, g)| (p - g).powi(2) / g).sum::<f64>() / n,
        (p.iter().zip(&g).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt(),
        (p.iter().zip(&g).map(|(p, g)| (p.ln() - g.ln()).powi(2)).sum::<f64>() / n).sqrt(),
    ];
    let err = [d.abs_rel, d.sq_rel, d.rmse, d.rmse_log].iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    push("depth_direct", err, 1e-6);

    let size = 16;
    let x: Vec<f64> = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| (v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
    push("ssim_identity", (ssim(&x, &x, size, None)? - 1.0).abs(), 1e-9);
    push("ssim_direct", (ssim(&x, &y, size, None)? - ssim_direct(&x, &y, size)).abs(), 1e-6);

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=6);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut b: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        b.shuffle(&mut rng);
        worst = worst.max((emd_1d(&a, &b)? - emd_brute_force(&a, &b)).abs());
    }
    push("emd_brute_force", worst, 1e-12);
    Ok(report)
}

/// All three suites at one precision.
pub fn run_all<T: Element>(cfg: &GradcheckConfig) -> Result<SuiteReport> {
    let mut report = gradient_suite::<T>(cfg)?;
    report.extend(double_backprop_suite::<T>(cfg)?);
    report.extend(metric_suite(cfg.seed)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::inject_conv_backward_sign_flip;

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1e6, 0.0], &[1e6 * (1.0 + 1e-5), 0.0]) - 1e-5).abs() < 1e-9);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn op_suite_passes_quickly_on_few_shapes() {
        let cfg = GradcheckConfig { shapes_per_op: 3, ..GradcheckConfig::for_dtype(DType::F64) };
        let r = gradient_suite::<f64>(&cfg).unwrap();
        assert!(r.passed(), "{:?}", r.first_failure());
        assert!(r.results.len() >= 30);
    }

    #[test]
    fn double_suite_passes_on_few_shapes() {
        let cfg = GradcheckConfig { shapes_per_op: 3, ..GradcheckConfig::for_dtype(DType::F64) };
        let r = double_backprop_suite::<f64>(&cfg).unwrap();
        assert!(r.passed(), "{:?}", r.first_failure());
    }

    #[test]
    fn f32_suite_passes_at_its_tolerance() {
        let cfg = GradcheckConfig { shapes_per_op: 3, ..GradcheckConfig::for_dtype(DType::F32) };
        let r = gradient_suite::<f32>(&cfg).unwrap();
        assert!(r.passed(), "{:?}", r.first_failure());
    }

    #[test]
    fn metric_suite_passes() {
        let r = metric_suite(0).unwrap();
        assert!(r.passed(), "{:?}", r.first_failure());
    }

    #[test]
    fn sign_flip_in_conv_backward_is_caught() {
        let cfg = GradcheckConfig { shapes_per_op: 3, ..GradcheckConfig::for_dtype(DType::F64) };
        inject_conv_backward_sign_flip(true);
        let r = gradient_suite::<f64>(&cfg);
        inject_conv_backward_sign_flip(false);
        let r = r.unwrap();
        let bad = r.first_failure().expect("fault detected");
        assert!(bad.name.starts_with("conv2d"));
        assert!(bad.max_rel_err > 1.0);
    }

    #[test]
    fn brute_force_emd_small_cases() {
        assert_eq!(emd_brute_force(&[0.0], &[2.5]), 2.5);
        assert_eq!(emd_brute_force(&[0.0, 1.0], &[1.0, 0.0]), 0.0);
    }
}
