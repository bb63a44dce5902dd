//! Likelihood-guided pose refinement with L-BFGS and a strong-Wolfe line search.

use diffmath::{Array, Tape};
use num_dual::Dual64;
use serde::{Deserialize, Serialize};

use crate::error::{FlagError, Result};
use crate::flow::{BoundFlow, FlowModel};
use crate::kinematics::rotation::{Mat3, Vec3};
use crate::kinematics::{condition, forward_kinematics_generic, HmdSignal, Pose, ShapeParams, Skeleton, TRACKED};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub history: usize,
    pub max_iterations: usize,
    pub c1: f64,
    pub c2: f64,
    pub initial_step: f64,
    /// Evaluation budget of one line search.
    pub max_line_search: usize,
    pub tolerance_grad: f64,
    pub tolerance_change: f64,
    pub eval_checkpoints: Vec<usize>,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iterations: 50,
            c1: 1e-4,
            c2: 0.9,
            initial_step: 1.0,
            max_line_search: 25,
            tolerance_grad: 1e-10,
            tolerance_change: 1e-14,
            eval_checkpoints: vec![2, 5, 10, 25, 50],
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(FlagError::Config(format!("Wolfe constants need 0 < c1 < c2 < 1, got {} and {}", self.c1, self.c2)));
        }
        if self.history == 0 || self.max_line_search == 0 {
            return Err(FlagError::Config("L-BFGS history and line-search budget must be positive".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(FlagError::Config("initial step must be positive".into()));
        }
        Ok(())
    }
}

/// Both strong-Wolfe inequalities, re-evaluated at an accepted step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WolfeCheck {
    pub iteration: usize,
    pub step: f64,
    pub sufficient_decrease: bool,
    pub curvature: bool,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Objective after each iteration; `trace[0]` is the starting value.
    pub trace: Vec<f64>,
    /// Iterate after each iteration; `iterates[0]` is the start.
    pub iterates: Vec<Vec<f64>>,
    pub wolfe: Vec<WolfeCheck>,
    /// Set when a line search ran out of evaluations without meeting both conditions.
    pub line_search_failed: bool,
}

impl LbfgsResult {
    /// Iterate at iteration `k`, or the last one when the run stopped earlier.
    pub fn iterate_at(&self, k: usize) -> &[f64] {
        &self.iterates[k.min(self.iterates.len() - 1)]
    }

    pub fn value_at(&self, k: usize) -> f64 {
        self.trace[k.min(self.trace.len() - 1)]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizer of the cubic through two points with slopes, clamped to `bounds`.
fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: (f64, f64)) -> f64 {
    let (lo, hi) = bounds;
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2sq = d1 * d1 - g1 * g2;
    if d2sq >= 0.0 {
        let d2 = d2sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct Probe {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

struct LineSearch {
    probe: Probe,
    evaluations: usize,
    satisfied: bool,
}

type Objective<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

fn probe(obj: &mut Objective, x: &[f64], d: &[f64], t: f64) -> Result<Probe> {
    let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
    let (f, g) = match obj(&xt) {
        Ok(v) => v,
        Err(FlagError::Numeric(_)) | Err(FlagError::Math(_)) => (f64::INFINITY, vec![0.0; x.len()]),
        Err(e) => return Err(e),
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Ok(Probe { t, f: f64::INFINITY, g: vec![0.0; x.len()], gtd: f64::NAN });
    }
    let gtd = dot(&g, d);
    Ok(Probe { t, f, g, gtd })
}

/// Bracketing followed by cubic-interpolation zoom.
fn strong_wolfe(
    obj: &mut Objective,
    x: &[f64],
    d: &[f64],
    f0: f64,
    g0: &[f64],
    gtd0: f64,
    t0: f64,
    cfg: &LbfgsConfig,
) -> Result<LineSearch> {
    let d_norm = max_abs(d);
    let armijo = |p: &Probe| p.f <= f0 + cfg.c1 * p.t * gtd0;
    let curvature = |p: &Probe| p.gtd.abs() <= -cfg.c2 * gtd0;
    let mut prev = Probe { t: 0.0, f: f0, g: g0.to_vec(), gtd: gtd0 };
    let mut cur = probe(obj, x, d, t0)?;
    let mut evals = 1;
    let mut first = true;
    // `low` satisfies sufficient decrease and has the lower value.
    let (mut low, mut high) = loop {
        if !armijo(&cur) || (!first && cur.f >= prev.f) {
            break (prev, cur);
        }
        if curvature(&cur) {
            return Ok(LineSearch { probe: cur, evaluations: evals, satisfied: true });
        }
        if cur.gtd >= 0.0 {
            break (cur, prev);
        }
        if evals >= cfg.max_line_search {
            return Ok(LineSearch { probe: cur, evaluations: evals, satisfied: false });
        }
        let lo = cur.t + 0.01 * (cur.t - prev.t);
        let hi = cur.t * 10.0;
        let t = cubic_interpolate(prev.t, prev.f, prev.gtd, cur.t, cur.f, cur.gtd, (lo, hi));
        let next = probe(obj, x, d, t)?;
        evals += 1;
        prev = cur;
        cur = next;
        first = false;
    };
    if low.f > high.f && armijo(&high) {
        std::mem::swap(&mut low, &mut high);
    }
    let mut insufficient = false;
    while evals < cfg.max_line_search {
        let (a, b) = (low.t.min(high.t), low.t.max(high.t));
        if (b - a) * d_norm < cfg.tolerance_change {
            break;
        }
        let mut t = if high.f.is_finite() {
            cubic_interpolate(low.t, low.f, low.gtd, high.t, high.f, high.gtd, (a, b))
        } else {
            0.5 * (a + b)
        };
        let eps = 0.1 * (b - a);
        if (b - t).min(t - a) < eps {
            if insufficient || t >= b || t <= a {
                t = if (t - b).abs() < (t - a).abs() { b - eps } else { a + eps };
                insufficient = false;
            } else {
                insufficient = true;
            }
        } else {
            insufficient = false;
        }
        let p = probe(obj, x, d, t)?;
        evals += 1;
        if !armijo(&p) || p.f >= low.f {
            high = p;
        } else {
            if curvature(&p) {
                return Ok(LineSearch { probe: p, evaluations: evals, satisfied: true });
            }
            if p.gtd * (high.t - low.t) >= 0.0 {
                high = std::mem::replace(&mut low, p);
            } else {
                low = p;
            }
        }
    }
    let ok = low.t > 0.0 && armijo(&low) && curvature(&low);
    Ok(LineSearch { probe: low, evaluations: evals, satisfied: ok })
}

/// Two-loop recursion: `-H g` from the stored curvature pairs.
fn direction(g: &[f64], mem: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut alpha = vec![0.0; mem.len()];
    for (i, (s, y, rho)) in mem.iter().enumerate().rev() {
        alpha[i] = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(a, b)| *a -= alpha[i] * b);
    }
    if let Some((s, y, _)) = mem.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, (s, y, rho)) in mem.iter().enumerate() {
        let beta = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(a, b)| *a += (alpha[i] - beta) * b);
    }
    q
}

/// Minimizes a smooth objective returning `(value, gradient)`.
///
/// The very first trial step is `min(1, 1/|g|_1)` times the initial step, so
/// a steep start does not leave the region where the objective is sensible.
pub fn lbfgs_minimize(
    mut obj: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: &[f64],
    cfg: &LbfgsConfig,
) -> Result<LbfgsResult> {
    cfg.validate()?;
    let obj: &mut Objective = &mut obj;
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj(&x)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(FlagError::Numeric("objective is not finite at the starting point".into()));
    }
    let mut res = LbfgsResult {
        x: x.clone(),
        value: f,
        iterations: 0,
        evaluations: 1,
        trace: vec![f],
        iterates: vec![x.clone()],
        wolfe: Vec::new(),
        line_search_failed: false,
    };
    if max_abs(&g) <= cfg.tolerance_grad {
        return Ok(res);
    }
    let mut mem: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(cfg.history);
    for k in 1..=cfg.max_iterations {
        let mut d = direction(&g, &mem);
        let mut gtd = dot(&g, &d);
        if !(gtd < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            gtd = -dot(&g, &g);
        }
        let t0 = if k == 1 {
            cfg.initial_step * (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
        } else {
            cfg.initial_step
        };
        let ls = strong_wolfe(obj, &x, &d, f, &g, gtd, t0, cfg)?;
        res.evaluations += ls.evaluations;
        let p = ls.probe;
        if !ls.satisfied {
            res.line_search_failed = true;
            if p.t > 0.0 && p.f < f {
                x.iter_mut().zip(&d).for_each(|(a, b)| *a += p.t * b);
                f = p.f;
                res.trace.push(f);
                res.iterates.push(x.clone());
                res.iterations = k;
            }
            break;
        }
        res.wolfe.push(WolfeCheck {
            iteration: k,
            step: p.t,
            sufficient_decrease: p.f <= f + cfg.c1 * p.t * gtd,
            curvature: p.gtd.abs() <= cfg.c2 * gtd.abs(),
        });
        let s: Vec<f64> = d.iter().map(|v| p.t * v).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ys = dot(&y, &s);
        if ys > 1e-10 {
            if mem.len() == cfg.history {
                mem.remove(0);
            }
            mem.push((s.clone(), y, 1.0 / ys));
        }
        x.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        let change = (f - p.f).abs();
        f = p.f;
        g = p.g;
        res.trace.push(f);
        res.iterates.push(x.clone());
        res.iterations = k;
        if max_abs(&g) <= cfg.tolerance_grad || max_abs(&s) <= cfg.tolerance_change || change < cfg.tolerance_change {
            break;
        }
    }
    res.x = x;
    res.value = f;
    Ok(res)
}

/// Observation in matrix form: decoded rotations and positions of the tracked joints.
#[derive(Clone, Debug)]
pub struct Target {
    pub rotations: [Mat3; TRACKED],
    pub positions: [Vec3; TRACKED],
}

impl Target {
    pub fn from_hmd(hmd: &HmdSignal) -> Result<Self> {
        let mut rotations = [[[0.0; 3]; 3]; TRACKED];
        let mut positions = [[0.0; 3]; TRACKED];
        for k in 0..TRACKED {
            rotations[k] = hmd.rotation(k)?;
            positions[k] = hmd.position(k);
        }
        Ok(Self { rotations, positions })
    }
}

fn data_cost_generic<T: crate::kinematics::rotation::Real>(
    skel: &Skeleton,
    theta: &[T],
    beta: &ShapeParams,
    target: &Target,
) -> Result<T> {
    let (rots, pos) = forward_kinematics_generic(skel, theta, beta)?;
    let mut c = T::from(0.0);
    for (k, &j) in skel.tracked().iter().enumerate() {
        for a in 0..3 {
            let dp = pos[j][a] - T::from(target.positions[k][a]);
            c += dp * dp;
            for b in 0..3 {
                let dr = rots[j][a][b] - T::from(target.rotations[k][a][b]);
                c += dr * dr;
            }
        }
    }
    Ok(c)
}

/// Squared position residuals plus squared Frobenius rotation residuals over the tracked joints.
pub fn data_cost(pose: &[f64], target: &Target, skel: &Skeleton, beta: &ShapeParams) -> Result<f64> {
    data_cost_generic(skel, pose, beta, target)
}

/// Value and gradient of [`data_cost`], one forward-mode pass per coordinate.
pub fn data_cost_grad(pose: &[f64], target: &Target, skel: &Skeleton, beta: &ShapeParams) -> Result<(f64, Vec<f64>)> {
    let value = data_cost(pose, target, skel, beta)?;
    let mut grad = vec![0.0; pose.len()];
    let mut theta: Vec<Dual64> = pose.iter().map(|&v| Dual64::from_re(v)).collect();
    for i in 0..pose.len() {
        theta[i] = Dual64::new(pose[i], 1.0);
        grad[i] = data_cost_generic(skel, &theta, beta, target)?.eps;
        theta[i] = Dual64::from_re(pose[i]);
    }
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineObjective {
    pub lambda_data: f64,
    pub lambda_prior: f64,
    pub lambda_r: f64,
}

impl Default for RefineObjective {
    fn default() -> Self {
        Self { lambda_data: 1.0, lambda_prior: 0.01, lambda_r: 0.1 }
    }
}

impl RefineObjective {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_data, self.lambda_prior, self.lambda_r].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(FlagError::Config("refinement weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One observed frame to refine against.
pub struct Instance<'a> {
    pub skel: &'a Skeleton,
    pub hmd: &'a HmdSignal,
    pub beta: &'a ShapeParams,
}

#[derive(Clone, Debug)]
pub struct Refinement {
    /// Final pose, canonicalized.
    pub pose: Pose,
    /// Pose-space iterate after each iteration (decoded for latent refinement).
    pub poses: Vec<Vec<f64>>,
    pub optimizer: LbfgsResult,
}

impl Refinement {
    /// Pose after iteration `k` (the final pose when the run stopped earlier).
    pub fn pose_at(&self, k: usize) -> Result<Pose> {
        Pose::from_flat(&self.poses[k.min(self.poses.len() - 1)])
    }
}

/// A flow bound as constants on a tape whose prefix is reused by every evaluation.
struct FlowTape {
    tape: Tape,
    flow: BoundFlow,
    cond: diffmath::Var,
    mark: usize,
}

impl FlowTape {
    fn new(flow: &FlowModel, raw_cond: &[f64]) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = flow.bind(&mut tape, false, &mut Vec::new());
        let cond = bound.condition(&mut tape, raw_cond)?;
        let mark = tape.len();
        Ok(Self { tape, flow: bound, cond, mark })
    }

    /// Decodes `z`, evaluates `cost` at the decoded pose and pulls its
    /// pose gradient back to the latent: returns `(cost, J^T grad)`.
    fn pullback(
        &mut self,
        z: &[f64],
        cost: impl FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
    ) -> Result<(f64, Vec<f64>)> {
        let t = &mut self.tape;
        t.truncate(self.mark);
        let d = z.len();
        let zv = t.param(Array::new(vec![1, d], z.to_vec())?);
        let x = self.flow.forward(t, zv, self.cond)?;
        let (value, gx) = cost(t.value(x).data())?;
        let wv = t.constant(Array::new(vec![1, d], gx)?);
        let p = t.mul(x, wv)?;
        let s = t.sum_all(p)?;
        let g = t.backward(s)?.wrt(zv)?;
        Ok((value, g.data().to_vec()))
    }

    fn decode(&mut self, z: &[f64]) -> Result<Vec<f64>> {
        let t = &mut self.tape;
        t.truncate(self.mark);
        let zv = t.constant(Array::new(vec![1, z.len()], z.to_vec())?);
        let x = self.flow.forward(t, zv, self.cond)?;
        Ok(t.value(x).data().to_vec())
    }

    /// `log p(x | c)` and its gradient.
    fn log_prob_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let t = &mut self.tape;
        t.truncate(self.mark);
        let xv = t.param(Array::new(vec![1, x.len()], x.to_vec())?);
        let (lp, _) = self.flow.log_prob(t, xv, self.cond, false)?;
        let s = t.sum_all(lp)?;
        let value = t.value(s).item()?;
        let g = t.backward(s)?.wrt(xv)?;
        Ok((value, g.data().to_vec()))
    }
}

fn observation(inst: &Instance) -> Vec<f64> {
    condition(inst.hmd, inst.beta).to_vec()
}

/// Latent-space refinement from `z0`; the regularizer pulls toward `anchor`.
///
/// Objective: `l_data * data(f(z, c)) - l_prior * log N(z) + l_r * |z - anchor|`.
pub fn refine_latent(
    flow: &FlowModel,
    inst: &Instance,
    z0: &[f64],
    anchor: &[f64],
    objective: &RefineObjective,
    cfg: &LbfgsConfig,
) -> Result<Refinement> {
    objective.validate()?;
    let d = flow.pose_dim();
    if z0.len() != d || anchor.len() != d {
        return Err(FlagError::Dimension("latent start and anchor must match the flow dimension".into()));
    }
    let target = Target::from_hmd(inst.hmd)?;
    let mut ft = FlowTape::new(flow, &observation(inst))?;
    let log_norm = 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let o = objective.clone();
    let obj = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (dc, mut grad) = ft.pullback(z, |x| {
            let (dc, gx) = data_cost_grad(x, &target, inst.skel, inst.beta)?;
            Ok((dc, gx.iter().map(|v| o.lambda_data * v).collect()))
        })?;
        let sq: f64 = z.iter().map(|v| v * v).sum();
        let diff: Vec<f64> = z.iter().zip(anchor).map(|(a, b)| a - b).collect();
        let r = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..d {
            grad[i] += o.lambda_prior * z[i];
            if r > 0.0 {
                grad[i] += o.lambda_r * diff[i] / r;
            }
        }
        Ok((o.lambda_data * dc + o.lambda_prior * (0.5 * sq + log_norm) + o.lambda_r * r, grad))
    };
    let res = lbfgs_minimize(obj, z0, cfg)?;
    let mut ft = FlowTape::new(flow, &observation(inst))?;
    let poses = res.iterates.iter().map(|z| ft.decode(z)).collect::<Result<Vec<_>>>()?;
    let pose = Pose::from_flat(poses.last().expect("start iterate"))?;
    Ok(Refinement { pose, poses, optimizer: res })
}

/// Pose-space refinement: `l_data * data(x) - l_prior * log p(x | c)`, starting at `x0`.
pub fn refine_pose(
    flow: &FlowModel,
    inst: &Instance,
    x0: &[f64],
    objective: &RefineObjective,
    cfg: &LbfgsConfig,
) -> Result<Refinement> {
    objective.validate()?;
    if x0.len() != flow.pose_dim() {
        return Err(FlagError::Dimension("starting pose must match the flow dimension".into()));
    }
    let target = Target::from_hmd(inst.hmd)?;
    let mut ft = FlowTape::new(flow, &observation(inst))?;
    let o = objective.clone();
    let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (dc, gd) = data_cost_grad(x, &target, inst.skel, inst.beta)?;
        let (value, grad) = if o.lambda_prior > 0.0 {
            let (lp, gl) = ft.log_prob_grad(x)?;
            let g = gd.iter().zip(&gl).map(|(a, b)| o.lambda_data * a - o.lambda_prior * b).collect();
            (o.lambda_data * dc - o.lambda_prior * lp, g)
        } else {
            (o.lambda_data * dc, gd.iter().map(|a| o.lambda_data * a).collect())
        };
        Ok((value, grad))
    };
    let res = lbfgs_minimize(obj, x0, cfg)?;
    let pose = Pose::from_flat(&res.x)?;
    Ok(Refinement { pose, poses: res.iterates.clone(), optimizer: res })
}
