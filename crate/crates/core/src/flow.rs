//! Conditional affine-coupling normalizing flow over flattened poses.
//!
//! The generative direction maps a base sample `z` to a pose `x` through
//! `blocks[0]`, then `blocks[1]`, and so on. Sub-flow `s` (used for
//! intermediate supervision) is the composition of the first `s` blocks.

use std::f64::consts::PI;

use diffmath::{Array, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlagError, Result};
use crate::nn::{Activation, BoundMlp, Mlp, Module};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub blocks: usize,
    pub hidden: usize,
    /// Sub-flow sizes receiving intermediate supervision, weighted `s / blocks`.
    pub taps: Vec<usize>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { blocks: 8, hidden: 256, taps: vec![2, 4, 6] }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 {
            return Err(FlagError::Config("flow needs at least one block and a hidden width".into()));
        }
        if let Some(&s) = self.taps.iter().find(|&&s| s == 0 || s > self.blocks) {
            return Err(FlagError::Config(format!("tap {s} outside 1..={}", self.blocks)));
        }
        Ok(())
    }

    pub fn tap_weights(&self) -> Vec<(usize, f64)> {
        self.taps.iter().map(|&s| (s, s as f64 / self.blocks as f64)).collect()
    }
}

/// `log N(z; 0, I)` for a `dim`-vector.
pub fn std_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

/// One affine coupling: the kept coordinates pass through; the others are
/// scaled by `exp(s)` and shifted by `t`, both functions of the kept part and
/// the condition.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    dim: usize,
    keep_first: bool,
    pub scale: Mlp,
    pub translate: Mlp,
}

impl CouplingBlock {
    /// Three-layer s and t networks; their final layers start at zero.
    pub fn new<R: Rng>(dim: usize, cond_dim: usize, hidden: usize, keep_first: bool, rng: &mut R) -> Self {
        let (k, m) = Self::split_sizes(dim, keep_first);
        let dims = [k + cond_dim, hidden, hidden, m];
        Self {
            dim,
            keep_first,
            scale: Mlp::new(&dims, Activation::Tanh, Activation::Tanh, true, rng),
            translate: Mlp::new(&dims, Activation::Relu, Activation::Identity, true, rng),
        }
    }

    fn split_sizes(dim: usize, keep_first: bool) -> (usize, usize) {
        let h = dim / 2;
        if keep_first {
            (h, dim - h)
        } else {
            (dim - h, h)
        }
    }

    /// Ranges of (kept, changed) coordinates.
    pub fn partition(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let h = self.dim / 2;
        if self.keep_first {
            (0..h, h..self.dim)
        } else {
            (h..self.dim, 0..h)
        }
    }

    pub fn keeps_first(&self) -> bool {
        self.keep_first
    }

    fn nets(&self, x: &[f64], c: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let (keep, _) = self.partition();
        let cd = c.len() / n.max(1);
        let w = keep.len() + cd;
        let mut inp = Vec::with_capacity(n * w);
        for r in 0..n {
            inp.extend_from_slice(&x[r * self.dim + keep.start..r * self.dim + keep.end]);
            inp.extend_from_slice(&c[r * cd..(r + 1) * cd]);
        }
        (self.scale.forward_rows(&inp, n), self.translate.forward_rows(&inp, n))
    }

    /// Generative direction over `n` rows. Returns outputs and per-row log-determinants.
    pub fn forward(&self, x: &[f64], c: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (s, t) = self.nets(x, c, n);
        let (_, change) = self.partition();
        let m = change.len();
        let mut y = x.to_vec();
        let mut logdet = vec![0.0; n];
        for r in 0..n {
            for (j, i) in change.clone().enumerate() {
                let sv = s[r * m + j];
                y[r * self.dim + i] = x[r * self.dim + i] * sv.exp() + t[r * m + j];
                logdet[r] += sv;
            }
        }
        finite(&y, "coupling forward")?;
        Ok((y, logdet))
    }

    /// Inverse direction. The returned log-determinant is that of the inverse map.
    pub fn inverse(&self, y: &[f64], c: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        // The kept coordinates are unchanged, so the networks see the same input.
        let (s, t) = self.nets(y, c, n);
        let (_, change) = self.partition();
        let m = change.len();
        let mut x = y.to_vec();
        let mut logdet = vec![0.0; n];
        for r in 0..n {
            for (j, i) in change.clone().enumerate() {
                let sv = s[r * m + j];
                x[r * self.dim + i] = (y[r * self.dim + i] - t[r * m + j]) * (-sv).exp();
                logdet[r] -= sv;
            }
        }
        finite(&x, "coupling inverse")?;
        Ok((x, logdet))
    }
}

fn finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FlagError::Numeric(format!("{what} produced a non-finite value")))
    }
}

/// Conditional flow with training-set condition standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub blocks: Vec<CouplingBlock>,
    pose_dim: usize,
    cond_dim: usize,
    pub cond_mean: Array,
    pub cond_std: Array,
}

impl FlowModel {
    /// Block `i` keeps the first half when `i` is even; masks alternate.
    pub fn new<R: Rng>(pose_dim: usize, cond_dim: usize, config: &FlowConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if pose_dim < 2 {
            return Err(FlagError::Config("flow dimension must be at least 2".into()));
        }
        let blocks = (0..config.blocks)
            .map(|i| CouplingBlock::new(pose_dim, cond_dim, config.hidden, i % 2 == 0, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            blocks,
            pose_dim,
            cond_dim,
            cond_mean: Array::zeros(&[cond_dim]),
            cond_std: Array::full(&[cond_dim], 1.0)?,
        })
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Fits the condition standardizer to `conds` (row-major, `cond_dim` wide).
    pub fn fit_standardizer(&mut self, conds: &[f64]) -> Result<()> {
        let (mean, std) = column_stats(conds, self.cond_dim)?;
        self.cond_mean = Array::vector(mean)?;
        self.cond_std = Array::vector(std)?;
        Ok(())
    }

    pub fn standardize(&self, conds: &[f64]) -> Vec<f64> {
        standardize_with(conds, self.cond_mean.data(), self.cond_std.data())
    }

    fn check(&self, v: &[f64], c: &[f64], n: usize) -> Result<()> {
        if v.len() != n * self.pose_dim || c.len() != n * self.cond_dim {
            return Err(FlagError::Dimension(format!(
                "flow expects {n} rows of {} + {}, got {} and {}",
                self.pose_dim,
                self.cond_dim,
                v.len(),
                c.len()
            )));
        }
        Ok(())
    }

    /// Base space to pose space.
    pub fn forward(&self, z: &[f64], c: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check(z, c, n)?;
        let cs = self.standardize(c);
        let mut x = z.to_vec();
        for b in &self.blocks {
            x = b.forward(&x, &cs, n)?.0;
        }
        Ok(x)
    }

    /// Pose space to base space (the oracle latent).
    pub fn inverse(&self, x: &[f64], c: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.inverse_upto(x, &self.standardize(c), n, self.blocks.len())?.0)
    }

    fn inverse_upto(&self, x: &[f64], cs: &[f64], n: usize, upto: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != n * self.pose_dim {
            return Err(FlagError::Dimension("flow inverse input width".into()));
        }
        let mut z = x.to_vec();
        let mut logdet = vec![0.0; n];
        for b in self.blocks[..upto].iter().rev() {
            let (nz, ld) = b.inverse(&z, cs, n)?;
            z = nz;
            logdet.iter_mut().zip(ld).for_each(|(a, d)| *a += d);
        }
        Ok((z, logdet))
    }

    /// Per-row log density, plus per-tap log densities (sub-flow order of
    /// `config.taps`) when `taps` is set.
    pub fn log_prob(&self, x: &[f64], c: &[f64], n: usize, taps: bool) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check(x, c, n)?;
        let cs = self.standardize(c);
        let lp = |upto: usize| -> Result<Vec<f64>> {
            let (z, ld) = self.inverse_upto(x, &cs, n, upto)?;
            Ok((0..n)
                .map(|r| std_normal_log_density(&z[r * self.pose_dim..(r + 1) * self.pose_dim]) + ld[r])
                .collect())
        };
        let full = lp(self.blocks.len())?;
        let tap_lps = if taps {
            self.config.taps.iter().map(|&s| lp(s)).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok((full, tap_lps))
    }

    /// Mean negative log-likelihood with intermediate supervision, evaluated without a tape.
    pub fn nll(&self, x: &[f64], c: &[f64], n: usize, taps: bool) -> Result<f64> {
        if n == 0 {
            return Err(FlagError::Invalid("NLL of an empty batch".into()));
        }
        let (full, tap_lps) = self.log_prob(x, c, n, taps)?;
        let weights = self.config.tap_weights();
        let mut total = 0.0;
        for r in 0..n {
            let mut v = full[r];
            for (k, (_, w)) in weights.iter().enumerate().take(tap_lps.len()) {
                v += w * tap_lps[k][r];
            }
            total -= v;
        }
        Ok(total / n as f64)
    }

    pub fn bind(&self, t: &mut Tape, train: bool, reg: &mut Vec<Var>) -> BoundFlow {
        BoundFlow {
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    keep: b.partition().0,
                    change: b.partition().1,
                    s: b.scale.bind(t, train, reg),
                    t: b.translate.bind(t, train, reg),
                })
                .collect(),
            pose_dim: self.pose_dim,
            taps: self.config.tap_weights(),
            cond_mean: self.cond_mean.data().to_vec(),
            cond_std: self.cond_std.data().to_vec(),
        }
    }
}

impl Module for FlowModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.scale.visit(&format!("{prefix}blocks.{i}.s"), f);
            b.translate.visit(&format!("{prefix}blocks.{i}.t"), f);
        }
        f(format!("{prefix}cond_mean"), &self.cond_mean);
        f(format!("{prefix}cond_std"), &self.cond_std);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.scale.visit_mut(&format!("{prefix}blocks.{i}.s"), f);
            b.translate.visit_mut(&format!("{prefix}blocks.{i}.t"), f);
        }
        f(format!("{prefix}cond_mean"), &mut self.cond_mean);
        f(format!("{prefix}cond_std"), &mut self.cond_std);
    }
}

/// Column means and standard deviations (floored at 1e-6).
pub fn column_stats(rows: &[f64], width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rows.len() / width.max(1);
    if n == 0 || rows.len() != n * width {
        return Err(FlagError::Invalid("standardizer needs at least one full row".into()));
    }
    let mut mean = vec![0.0; width];
    for r in rows.chunks(width) {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; width];
    for r in rows.chunks(width) {
        for k in 0..width {
            var[k] += (r[k] - mean[k]).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / n as f64).sqrt().max(1e-6)).collect();
    Ok((mean, std))
}

pub fn standardize_with(rows: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    let w = mean.len();
    rows.chunks(w)
        .flat_map(|r| (0..w).map(move |k| (r[k] - mean[k]) / std[k]))
        .collect()
}

pub struct BoundBlock {
    keep: std::ops::Range<usize>,
    change: std::ops::Range<usize>,
    s: BoundMlp,
    t: BoundMlp,
}

impl BoundBlock {
    fn nets(&self, tp: &mut Tape, x: Var, c: Var) -> Result<(Var, Var, Var)> {
        let xk = tp.slice(x, 1, self.keep.start, self.keep.end)?;
        let xc = tp.slice(x, 1, self.change.start, self.change.end)?;
        let inp = tp.concat(&[xk, c], 1)?;
        let s = self.s.forward(tp, inp)?;
        let t = self.t.forward(tp, inp)?;
        Ok((xc, s, t))
    }

    fn assemble(&self, tp: &mut Tape, x: Var, changed: Var) -> Result<Var> {
        let xk = tp.slice(x, 1, self.keep.start, self.keep.end)?;
        Ok(if self.keep.start == 0 {
            tp.concat(&[xk, changed], 1)?
        } else {
            tp.concat(&[changed, xk], 1)?
        })
    }

    /// Returns `(y, logdet)` with `logdet` shaped `[n]`.
    pub fn forward(&self, tp: &mut Tape, x: Var, c: Var) -> Result<(Var, Var)> {
        let (xc, s, t) = self.nets(tp, x, c)?;
        let e = tp.exp(s)?;
        let scaled = tp.mul(xc, e)?;
        let yc = tp.add(scaled, t)?;
        let ld = tp.sum(s, 1)?;
        Ok((self.assemble(tp, x, yc)?, ld))
    }

    /// Returns `(x, logdet of the inverse)`.
    pub fn inverse(&self, tp: &mut Tape, y: Var, c: Var) -> Result<(Var, Var)> {
        let (yc, s, t) = self.nets(tp, y, c)?;
        let diff = tp.sub(yc, t)?;
        let ns = tp.neg(s)?;
        let e = tp.exp(ns)?;
        let xc = tp.mul(diff, e)?;
        let ld = tp.sum(ns, 1)?;
        Ok((self.assemble(tp, y, xc)?, ld))
    }
}

/// A flow whose parameters live on a tape.
pub struct BoundFlow {
    pub blocks: Vec<BoundBlock>,
    pose_dim: usize,
    taps: Vec<(usize, f64)>,
    cond_mean: Vec<f64>,
    cond_std: Vec<f64>,
}

impl BoundFlow {
    /// Standardized condition constant from raw rows.
    pub fn condition(&self, tp: &mut Tape, raw: &[f64]) -> Result<Var> {
        let w = self.cond_mean.len();
        let n = raw.len() / w;
        let data = standardize_with(raw, &self.cond_mean, &self.cond_std);
        Ok(tp.constant(Array::new(vec![n, w], data)?))
    }

    pub fn forward(&self, tp: &mut Tape, z: Var, c: Var) -> Result<Var> {
        let mut x = z;
        for b in &self.blocks {
            x = b.forward(tp, x, c)?.0;
        }
        Ok(x)
    }

    /// Inverse through the first `upto` blocks; returns `(z, summed inverse logdet [n])`.
    pub fn inverse_upto(&self, tp: &mut Tape, x: Var, c: Var, upto: usize) -> Result<(Var, Option<Var>)> {
        let mut z = x;
        let mut total: Option<Var> = None;
        for b in self.blocks[..upto].iter().rev() {
            let (nz, ld) = b.inverse(tp, z, c)?;
            z = nz;
            total = Some(match total {
                None => ld,
                Some(acc) => tp.add(acc, ld)?,
            });
        }
        Ok((z, total))
    }

    /// Base log density of each row of `z`, shape `[n]`.
    pub fn base_log_density(&self, tp: &mut Tape, z: Var) -> Result<Var> {
        let sq = tp.square(z)?;
        let s = tp.sum(sq, 1)?;
        let h = tp.scale(s, -0.5)?;
        Ok(tp.add_scalar(h, -0.5 * self.pose_dim as f64 * (2.0 * PI).ln())?)
    }

    fn log_prob_upto(&self, tp: &mut Tape, x: Var, c: Var, upto: usize) -> Result<Var> {
        let (z, ld) = self.inverse_upto(tp, x, c, upto)?;
        let base = self.base_log_density(tp, z)?;
        Ok(match ld {
            Some(ld) => tp.add(base, ld)?,
            None => base,
        })
    }

    /// `(log p [n], per-tap log p [n])`.
    pub fn log_prob(&self, tp: &mut Tape, x: Var, c: Var, taps: bool) -> Result<(Var, Vec<Var>)> {
        let full = self.log_prob_upto(tp, x, c, self.blocks.len())?;
        let mut tap_lps = Vec::new();
        if taps {
            for &(s, _) in &self.taps {
                tap_lps.push(self.log_prob_upto(tp, x, c, s)?);
            }
        }
        Ok((full, tap_lps))
    }

    /// `-mean(log p + sum_s w_s log p_s)`.
    pub fn nll_loss(&self, tp: &mut Tape, x: Var, c: Var, taps: bool) -> Result<Var> {
        if tp.shape(x)[0] == 0 {
            return Err(FlagError::Invalid("NLL of an empty batch".into()));
        }
        let (full, tap_lps) = self.log_prob(tp, x, c, taps)?;
        let mut acc = full;
        for (lp, &(_, w)) in tap_lps.into_iter().zip(&self.taps) {
            let weighted = tp.scale(lp, w)?;
            acc = tp.add(acc, weighted)?;
        }
        let m = tp.mean_all(acc)?;
        Ok(tp.neg(m)?)
    }
}
