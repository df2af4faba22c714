//! Input-convex networks and their input gradients (Brenier maps).
//!
//! Layer recursion, with `z_0 = u`:
//!
//! ```text
//! z_{l+1} = h_l(W_l z_l + A_l u + b_l),   l = 0..L-1
//! ```
//!
//! `W_0 = 0`, `W_l ≥ 0` for `l ≥ 1`, `h_0(x) = max(αx, x)²` and
//! `h_l(x) = max(αx, x)` afterwards, `z_L` scalar. The potential may carry an
//! extra fixed term `(c/2)‖u‖²`; with `c > 0` the potential is strongly
//! convex and its gradient map is a bijection. `c = 0` gives the bare network.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};

pub const DEFAULT_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcnnParams {
    pub dim: usize,
    pub slope: f64,
    /// Coefficient `c` of the `(c/2)‖u‖²` term added to the potential. Not trained.
    pub quadratic: f64,
    /// `w[l]` is `n_{l+1} × n_l`; `w[0]` (shape `n_1 × d`) must be zero.
    pub w: Vec<Tensor>,
    /// `a[l]` is `n_{l+1} × d`.
    pub a: Vec<Tensor>,
    /// `b[l]` has length `n_{l+1}`.
    pub b: Vec<Tensor>,
}

impl IcnnParams {
    /// Random feasible network: `A, b ~ N(0, 0.1²)`, `W = |N(0, 0.1²)|`.
    pub fn init(dim: usize, hidden: &[usize], quadratic: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f64, 0.1).expect("valid std");
        let mut widths = hidden.to_vec();
        widths.push(1);
        let mut w = Vec::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut prev = dim;
        for (l, &n) in widths.iter().enumerate() {
            let wv = if l == 0 {
                vec![0.0; n * prev]
            } else {
                (0..n * prev).map(|_| normal.sample(rng).abs()).collect()
            };
            w.push(Tensor::matrix(n, prev, wv).expect("sized"));
            a.push(Tensor::matrix(n, dim, (0..n * dim).map(|_| normal.sample(rng)).collect()).expect("sized"));
            b.push(Tensor::vector((0..n).map(|_| normal.sample(rng)).collect()));
            prev = n;
        }
        Self { dim, slope: DEFAULT_SLOPE, quadratic, w, a, b }
    }

    /// Network from explicit layers; checks shapes and feasibility.
    pub fn from_layers(dim: usize, w: Vec<Tensor>, a: Vec<Tensor>, b: Vec<Tensor>) -> Result<Self> {
        let p = Self { dim, slope: DEFAULT_SLOPE, quadratic: 0.0, w, a, b };
        p.validate()?;
        Ok(p)
    }

    /// Potential `(c/2)‖u‖²` with every layer zeroed: its gradient is `c·u`.
    pub fn quadratic_only(dim: usize, hidden: &[usize], c: f64) -> Self {
        let mut p = Self::init(dim, hidden, c, &mut ChaCha8Rng::seed_from_u64(0));
        for t in p.w.iter_mut().chain(p.a.iter_mut()).chain(p.b.iter_mut()) {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    pub fn layers(&self) -> usize {
        self.w.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.b.iter().map(Tensor::len).collect()
    }

    pub fn num_params(&self) -> usize {
        self.w.iter().skip(1).chain(&self.a).chain(&self.b).map(Tensor::len).sum()
    }

    /// Checks shapes, `W_0 = 0`, `W_l ≥ 0` and a scalar output.
    pub fn validate(&self) -> Result<()> {
        let l = self.w.len();
        if l == 0 || self.a.len() != l || self.b.len() != l {
            return Err(Error::Shape(format!(
                "layer lists have lengths {}, {}, {}",
                self.w.len(),
                self.a.len(),
                self.b.len()
            )));
        }
        let mut prev = self.dim;
        for i in 0..l {
            let n = self.b[i].len();
            if self.w[i].shape() != [n, prev] {
                return Err(Error::Shape(format!("W{} has shape {:?}, expected [{}, {}]", i, self.w[i].shape(), n, prev)));
            }
            if self.a[i].shape() != [n, self.dim] {
                return Err(Error::Shape(format!("A{} has shape {:?}, expected [{}, {}]", i, self.a[i].shape(), n, self.dim)));
            }
            prev = n;
        }
        if prev != 1 {
            return Err(Error::Shape(format!("last layer has width {prev}, must be 1")));
        }
        if self.w[0].values().iter().any(|&v| v != 0.0) {
            return Err(Error::Constraint("W0 must be identically zero".into()));
        }
        for (i, w) in self.w.iter().enumerate().skip(1) {
            if let Some(pos) = w.values().iter().position(|&v| !(v >= 0.0)) {
                return Err(Error::Constraint(format!("W{} entry {} is {} (< 0)", i, pos, w.values()[pos])));
            }
        }
        if !(self.quadratic >= 0.0) {
            return Err(Error::Constraint(format!("quadratic coefficient {} < 0", self.quadratic)));
        }
        Ok(())
    }

    /// Named trainable tensors (`W_0` excluded).
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in 0..self.layers() {
            if l > 0 {
                out.push((format!("{prefix}.W{l}"), &self.w[l]));
            }
            out.push((format!("{prefix}.A{l}"), &self.a[l]));
            out.push((format!("{prefix}.b{l}"), &self.b[l]));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, ((w, a), b)) in self.w.iter_mut().zip(self.a.iter_mut()).zip(self.b.iter_mut()).enumerate() {
            if l > 0 {
                out.push((format!("{prefix}.W{l}"), w));
            }
            out.push((format!("{prefix}.A{l}"), a));
            out.push((format!("{prefix}.b{l}"), b));
        }
        out
    }

    pub fn bind(&self, prefix: &str, bindings: &mut Bindings) {
        for (name, t) in self.named_params(prefix) {
            bindings.insert(name, t.clone());
        }
    }

    /// Declares this network's parameters as named tape inputs.
    pub fn declare(&self, tape: &mut Tape, prefix: &str) -> IcnnVars {
        let mut w = Vec::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for l in 0..self.layers() {
            w.push(if l > 0 { Some(tape.input(&format!("{prefix}.W{l}"))) } else { None });
            a.push(tape.input(&format!("{prefix}.A{l}")));
            let bv = tape.input(&format!("{prefix}.b{l}"));
            b.push(tape.reshape(bv, vec![1, self.b[l].len()]));
        }
        IcnnVars { w, a, b, slope: self.slope, quadratic: self.quadratic }
    }
}

/// Tape handles for one network's parameters.
#[derive(Clone, Debug)]
pub struct IcnnVars {
    w: Vec<Option<Var>>,
    a: Vec<Var>,
    b: Vec<Var>,
    slope: f64,
    quadratic: f64,
}

impl IcnnVars {
    fn pre_activations(&self, tape: &mut Tape, u: Var, ones: Var) -> Vec<Var> {
        let mut pres = Vec::with_capacity(self.a.len());
        let mut z = None;
        for l in 0..self.a.len() {
            let au = tape.matmul_t(u, self.a[l]);
            let bias = tape.matmul(ones, self.b[l]);
            let mut pre = tape.add(au, bias);
            if let (Some(w), Some(zl)) = (self.w[l], z) {
                let wz = tape.matmul_t(zl, w);
                pre = tape.add(pre, wz);
            }
            let act = if l == 0 { Unary::SquaredLeakyRelu(self.slope) } else { Unary::LeakyRelu(self.slope) };
            z = Some(tape.map(pre, act));
            pres.push(pre);
        }
        pres
    }

    fn half_sq_norm_rows(&self, tape: &mut Tape, u: Var) -> Var {
        let sq = tape.square(u);
        let s = tape.sum_axis(sq, 1);
        tape.scale(s, 0.5 * self.quadratic)
    }

    /// Potential for each row of `u` (`B×d`); returns `B×1`. `ones` is a `B×1` constant.
    pub fn potential(&self, tape: &mut Tape, u: Var, ones: Var) -> Var {
        let pres = self.pre_activations(tape, u, ones);
        let last = pres.len() - 1;
        let act = if last == 0 { Unary::SquaredLeakyRelu(self.slope) } else { Unary::LeakyRelu(self.slope) };
        let z = tape.map(pres[last], act);
        if self.quadratic != 0.0 {
            let q = self.half_sq_norm_rows(tape, u);
            tape.add(z, q)
        } else {
            z
        }
    }

    /// Input gradient of the potential for each row of `u`, unrolled layer by
    /// layer into first-order tape operations; returns `B×d`.
    pub fn gradient_map(&self, tape: &mut Tape, u: Var, ones: Var) -> Var {
        let pres = self.pre_activations(tape, u, ones);
        let slope_of = |l: usize| {
            if l == 0 {
                Unary::SquaredLeakyReluSlope(self.slope)
            } else {
                Unary::LeakyReluSlope(self.slope)
            }
        };
        let last = pres.len() - 1;
        let mut s = tape.map(pres[last], slope_of(last));
        let mut g = tape.matmul(s, self.a[last]);
        for l in (1..=last).rev() {
            let w = self.w[l].expect("layers past the first carry W");
            let delta = tape.matmul(s, w);
            let d = tape.map(pres[l - 1], slope_of(l - 1));
            s = tape.mul(delta, d);
            let contrib = tape.matmul(s, self.a[l - 1]);
            g = tape.add(g, contrib);
        }
        if self.quadratic != 0.0 {
            let cu = tape.scale(u, self.quadratic);
            g = tape.add(g, cu);
        }
        g
    }
}

fn batch_tape(params: &IcnnParams, u: &Tensor, gradient: bool) -> Result<Tensor> {
    params.validate()?;
    if u.rank() != 2 || u.cols() != params.dim {
        return Err(Error::Shape(format!("input shape {:?}, expected [n, {}]", u.shape(), params.dim)));
    }
    let mut tape = Tape::new();
    let vars = params.declare(&mut tape, "f");
    let uv = tape.input("u");
    let ones = tape.constant(Tensor::filled(vec![u.rows(), 1], 1.0));
    let out = if gradient { vars.gradient_map(&mut tape, uv, ones) } else { vars.potential(&mut tape, uv, ones) };
    let mut bind = Bindings::new();
    params.bind("f", &mut bind);
    bind.insert("u".into(), u.clone());
    tape.evaluate(&bind, out)
}

/// Potential `z_L` (plus the optional quadratic term) at a single point.
pub fn icnn_eval(params: &IcnnParams, u: &[f64]) -> Result<f64> {
    check_dim(params, u)?;
    let t = batch_tape(params, &Tensor::matrix(1, u.len(), u.to_vec())?, false)?;
    Ok(t.item())
}

/// Potential at every row of `u`.
pub fn icnn_eval_batch(params: &IcnnParams, u: &Tensor) -> Result<Vec<f64>> {
    Ok(batch_tape(params, u, false)?.into_values())
}

/// `∂z_L/∂u` at a single point.
pub fn brenier_map(params: &IcnnParams, u: &[f64]) -> Result<Vec<f64>> {
    check_dim(params, u)?;
    Ok(batch_tape(params, &Tensor::matrix(1, u.len(), u.to_vec())?, true)?.into_values())
}

/// `∂z_L/∂u` at every row of `u`.
pub fn brenier_map_batch(params: &IcnnParams, u: &Tensor) -> Result<Tensor> {
    batch_tape(params, u, true)
}

fn check_dim(params: &IcnnParams, u: &[f64]) -> Result<()> {
    if u.len() != params.dim {
        return Err(Error::Shape(format!("input has dimension {}, network expects {}", u.len(), params.dim)));
    }
    Ok(())
}

/// Clamps `W_l` (l ≥ 1) at zero and zeroes `W_0`.
pub fn project_convex(params: &IcnnParams) -> IcnnParams {
    let mut p = params.clone();
    project_convex_in_place(&mut p);
    p
}

pub fn project_convex_in_place(params: &mut IcnnParams) {
    for (l, w) in params.w.iter_mut().enumerate() {
        for v in w.values_mut() {
            if l == 0 || *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub samples: usize,
    pub violations: usize,
    /// Largest `T(tu+(1-t)v) - tT(u) - (1-t)T(v)`; positive values break convexity.
    pub worst_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub samples: usize,
    pub violations: usize,
    /// Smallest `⟨g(u)-g(v), u-v⟩` seen.
    pub min_inner: f64,
}

const CHECK_RADIUS: f64 = 3.0;
const CHECK_CHUNK: usize = 2048;

fn uniform_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.random_range(-CHECK_RADIUS..CHECK_RADIUS)).collect()
}

/// Samples `(u, v, t)` uniformly from `[-3, 3]^d × [-3, 3]^d × [0, 1]` and
/// counts triples where the convexity inequality fails by more than `tol`.
///
/// The network is evaluated as given, so an infeasible one (negative `W`)
/// can be probed for counterexamples.
pub fn check_convexity(params: &IcnnParams, n_pairs: usize, tol: f64, seed: u64) -> Result<ConvexityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.dim;
    let mut report = ConvexityReport { samples: n_pairs, violations: 0, worst_gap: f64::NEG_INFINITY };
    let mut done = 0;
    while done < n_pairs {
        let n = CHECK_CHUNK.min(n_pairs - done);
        let u = uniform_points(&mut rng, n, d);
        let v = uniform_points(&mut rng, n, d);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let mix: Vec<f64> = (0..n * d).map(|k| t[k / d] * u[k] + (1.0 - t[k / d]) * v[k]).collect();
        let tu = eval_unchecked(params, Tensor::matrix(n, d, u)?)?;
        let tv = eval_unchecked(params, Tensor::matrix(n, d, v)?)?;
        let tm = eval_unchecked(params, Tensor::matrix(n, d, mix)?)?;
        for i in 0..n {
            let gap = tm[i] - (t[i] * tu[i] + (1.0 - t[i]) * tv[i]);
            report.worst_gap = report.worst_gap.max(gap);
            if gap > tol {
                report.violations += 1;
            }
        }
        done += n;
    }
    Ok(report)
}

/// Counts sampled pairs with `⟨g(u)-g(v), u-v⟩ < -tol`.
pub fn check_monotone(params: &IcnnParams, n_pairs: usize, tol: f64, seed: u64) -> Result<MonotoneReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.dim;
    let mut report = MonotoneReport { samples: n_pairs, violations: 0, min_inner: f64::INFINITY };
    let mut done = 0;
    while done < n_pairs {
        let n = CHECK_CHUNK.min(n_pairs - done);
        let u = uniform_points(&mut rng, n, d);
        let v = uniform_points(&mut rng, n, d);
        let gu = grad_unchecked(params, Tensor::matrix(n, d, u.clone())?)?;
        let gv = grad_unchecked(params, Tensor::matrix(n, d, v.clone())?)?;
        for i in 0..n {
            let inner: f64 = (0..d)
                .map(|j| (gu.get2(i, j) - gv.get2(i, j)) * (u[i * d + j] - v[i * d + j]))
                .sum();
            report.min_inner = report.min_inner.min(inner);
            if inner < -tol {
                report.violations += 1;
            }
        }
        done += n;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FiniteDifferenceReport {
    /// Points compared.
    pub points: usize,
    /// Points redrawn because a leaky-ReLU pre-activation was within the margin of its kink.
    pub redrawn: usize,
    /// Largest `‖g − g_fd‖ / max(‖g‖, 1)`.
    pub max_rel_err: f64,
}

/// Smallest `|pre-activation|` over the non-smooth layers (`l ≥ 1`) at `u`.
fn kink_distance(params: &IcnnParams, u: &[f64]) -> f64 {
    let leaky = |x: f64| if x >= 0.0 { x } else { params.slope * x };
    let mut z: Vec<f64> = Vec::new();
    let mut closest = f64::INFINITY;
    for l in 0..params.layers() {
        let (a, b, w) = (&params.a[l], &params.b[l], &params.w[l]);
        let pre: Vec<f64> = (0..a.rows())
            .map(|i| {
                let mut v = b.values()[i] + (0..params.dim).map(|j| a.get2(i, j) * u[j]).sum::<f64>();
                if l > 0 {
                    v += (0..w.cols()).map(|j| w.get2(i, j) * z[j]).sum::<f64>();
                }
                v
            })
            .collect();
        if l > 0 {
            closest = pre.iter().fold(closest, |c, p| c.min(p.abs()));
        }
        z = pre.iter().map(|&p| if l == 0 { leaky(p).powi(2) } else { leaky(p) }).collect();
    }
    closest
}

/// Compares the Brenier map with central differences of the potential at
/// `n_points` uniform points of `[-3, 3]^d`, redrawing points whose
/// non-smooth pre-activations lie within `margin` of zero.
pub fn check_brenier_fd(params: &IcnnParams, n_points: usize, h: f64, margin: f64, seed: u64) -> Result<FiniteDifferenceReport> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.dim;
    let mut report = FiniteDifferenceReport { points: 0, redrawn: 0, max_rel_err: 0.0 };
    while report.points < n_points {
        if report.redrawn > 1000 * n_points.max(1) {
            return Err(Error::Config("could not find points away from the activation kinks".into()));
        }
        let u = uniform_points(&mut rng, 1, d);
        if kink_distance(params, &u) < margin {
            report.redrawn += 1;
            continue;
        }
        let mut probes = Vec::with_capacity(2 * d * d);
        for j in 0..d {
            for sign in [1.0, -1.0] {
                let mut p = u.clone();
                p[j] += sign * h;
                probes.extend(p);
            }
        }
        let f = icnn_eval_batch(params, &Tensor::matrix(2 * d, d, probes)?)?;
        let fd: Vec<f64> = (0..d).map(|j| (f[2 * j] - f[2 * j + 1]) / (2.0 * h)).collect();
        let g = brenier_map(params, &u)?;
        let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
        report.max_rel_err = report.max_rel_err.max(err / norm);
        report.points += 1;
    }
    Ok(report)
}

fn unchecked_tape(params: &IcnnParams, u: Tensor, gradient: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.declare(&mut tape, "f");
    let uv = tape.input("u");
    let ones = tape.constant(Tensor::filled(vec![u.rows(), 1], 1.0));
    let out = if gradient { vars.gradient_map(&mut tape, uv, ones) } else { vars.potential(&mut tape, uv, ones) };
    let mut bind = Bindings::new();
    params.bind("f", &mut bind);
    bind.insert("u".into(), u);
    tape.evaluate(&bind, out)
}

fn eval_unchecked(params: &IcnnParams, u: Tensor) -> Result<Vec<f64>> {
    Ok(unchecked_tape(params, u, false)?.into_values())
}

fn grad_unchecked(params: &IcnnParams, u: Tensor) -> Result<Tensor> {
    unchecked_tape(params, u, true)
}
