//! Latent-region approximator: a transformer over per-joint tokens that maps
//! the head-and-hands condition to a diagonal Gaussian over the flow's base
//! space, through a grid of `G` categorical variables with `M` classes each.

use std::f64::consts::PI;

use diffmath::{softplus, Array, Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlagError, Result};
use crate::kinematics::{Skeleton, JOINT_FEATURE_DIM, TRACKED};
use crate::nn::{Activation, BoundLinear, BoundMlp, Linear, Mlp, Module};

/// Lower bound added to the softplus standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-8;
const LN_EPS: f64 = 1e-5;
const KEY_MASK_PENALTY: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LraConfig {
    pub embed: usize,
    pub layers: usize,
    pub heads: usize,
    pub feedforward: usize,
    pub groups: usize,
    pub categories: usize,
    pub head_hidden: usize,
    pub tau: f64,
}

impl Default for LraConfig {
    fn default() -> Self {
        Self {
            embed: 64,
            layers: 2,
            heads: 4,
            feedforward: 128,
            groups: 16,
            categories: 32,
            head_hidden: 128,
            tau: 1.0,
        }
    }
}

impl LraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed % self.heads != 0 {
            return Err(FlagError::Config(format!(
                "embedding width {} not divisible by {} heads",
                self.embed, self.heads
            )));
        }
        if self.groups == 0 || self.categories == 0 || self.layers == 0 {
            return Err(FlagError::Config("latent grid and encoder depth must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(FlagError::Config("Gumbel temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian `N(mu, diag(sigma)^2)` over the base space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRegion {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl LatentRegion {
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let mut lp = -0.5 * z.len() as f64 * (2.0 * PI).ln();
        for ((zi, m), s) in z.iter().zip(&self.mu).zip(&self.sigma) {
            let s = s.max(SIGMA_FLOOR);
            lp -= 0.5 * ((zi - m) / s).powi(2) + s.ln();
        }
        lp
    }

    /// `n` i.i.d. draws; standard deviations are clamped at [`SIGMA_FLOOR`].
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                self.mu
                    .iter()
                    .zip(&self.sigma)
                    .map(|(m, s)| {
                        let e: f64 = StandardNormal.sample(rng);
                        m + s.max(SIGMA_FLOOR) * e
                    })
                    .collect()
            })
            .collect()
    }
}

/// Joints masked at `epoch` of `total`: five equal phases adding legs, spine,
/// arms and finally the pelvis, after an initial unmasked phase.
pub fn mask_schedule(skel: &Skeleton, epoch: usize, total: usize) -> Vec<usize> {
    let phase = if total == 0 { 4 } else { (5 * epoch / total).min(4) };
    let g = skel.curriculum();
    let order = [&g.legs, &g.spine, &g.arms, &g.root];
    let mut out: Vec<usize> = order[..phase].iter().flat_map(|v| v.iter().copied()).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Every joint except the tracked ones.
pub fn full_mask(skel: &Skeleton) -> Vec<usize> {
    let tracked = skel.tracked();
    (0..skel.joint_count()).filter(|j| !tracked.contains(j)).collect()
}

/// Standard Gumbel noise `-ln(-ln u)` for `n` values.
pub fn gumbel_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Relaxed one-hot draws for rows of `m` logits. With `hard` each row is the
/// one-hot of its relaxed argmax.
pub fn gumbel_softmax<R: Rng>(logits: &[f64], m: usize, tau: f64, hard: bool, rng: &mut R) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(FlagError::Invalid(format!("Gumbel temperature {tau} must be positive")));
    }
    if m == 0 || logits.len() % m != 0 {
        return Err(FlagError::Dimension("logits not a whole number of rows".into()));
    }
    let g = gumbel_noise(logits.len(), rng);
    let mut out = Vec::with_capacity(logits.len());
    for (row, noise) in logits.chunks(m).zip(g.chunks(m)) {
        let y: Vec<f64> = row.iter().zip(noise).map(|(l, e)| (l + e) / tau).collect();
        let mx = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = y.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        if hard {
            let k = argmax(&ex);
            out.extend((0..m).map(|i| if i == k { 1.0 } else { 0.0 }));
        } else {
            out.extend(ex.iter().map(|v| v / z));
        }
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax over rows of width `m`.
pub fn softmax_rows(logits: &[f64], m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(m) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        out.extend(ex.iter().map(|v| v / z));
    }
    out
}

/// Sinusoidal positional encoding, `[joints, width]` row-major.
pub fn positional_encoding(joints: usize, width: usize) -> Vec<f64> {
    let mut pe = vec![0.0; joints * width];
    for j in 0..joints {
        for i in 0..width {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let a = j as f64 / freq;
            pe[j * width + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    pe
}

/// Learnable gain and bias applied after normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Array,
    pub bias: Array,
}

impl Norm {
    fn new(width: usize) -> Self {
        Self { gain: Array::full(&[width], 1.0).expect("finite"), bias: Array::zeros(&[width]) }
    }

    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Array)) {
        f(format!("{p}.gain"), &self.gain);
        f(format!("{p}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Array)) {
        f(format!("{p}.gain"), &mut self.gain);
        f(format!("{p}.bias"), &mut self.bias);
    }

    fn bind(&self, t: &mut Tape, train: bool, reg: &mut Vec<Var>) -> (Var, Var) {
        let g = t.leaf(self.gain.clone(), train);
        let b = t.leaf(self.bias.clone(), train);
        if train {
            reg.push(g);
            reg.push(b);
        }
        (g, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderLayer {
    fn new<R: Rng>(e: usize, f: usize, rng: &mut R) -> Self {
        Self {
            norm1: Norm::new(e),
            query: Linear::new(e, e, rng),
            key: Linear::new(e, e, rng),
            value: Linear::new(e, e, rng),
            out: Linear::new(e, e, rng),
            norm2: Norm::new(e),
            ff1: Linear::new(e, f, rng),
            ff2: Linear::new(f, e, rng),
        }
    }

    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Array)) {
        self.norm1.visit(&format!("{p}.norm1"), f);
        self.query.visit(&format!("{p}.query"), f);
        self.key.visit(&format!("{p}.key"), f);
        self.value.visit(&format!("{p}.value"), f);
        self.out.visit(&format!("{p}.out"), f);
        self.norm2.visit(&format!("{p}.norm2"), f);
        self.ff1.visit(&format!("{p}.ff1"), f);
        self.ff2.visit(&format!("{p}.ff2"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Array)) {
        self.norm1.visit_mut(&format!("{p}.norm1"), f);
        self.query.visit_mut(&format!("{p}.query"), f);
        self.key.visit_mut(&format!("{p}.key"), f);
        self.value.visit_mut(&format!("{p}.value"), f);
        self.out.visit_mut(&format!("{p}.out"), f);
        self.norm2.visit_mut(&format!("{p}.norm2"), f);
        self.ff1.visit_mut(&format!("{p}.ff1"), f);
        self.ff2.visit_mut(&format!("{p}.ff2"), f);
    }

    fn bind(&self, t: &mut Tape, train: bool, reg: &mut Vec<Var>) -> BoundLayer {
        BoundLayer {
            norm1: self.norm1.bind(t, train, reg),
            query: self.query.bind(t, train, reg),
            key: self.key.bind(t, train, reg),
            value: self.value.bind(t, train, reg),
            out: self.out.bind(t, train, reg),
            norm2: self.norm2.bind(t, train, reg),
            ff1: self.ff1.bind(t, train, reg),
            ff2: self.ff2.bind(t, train, reg),
        }
    }
}

/// The full approximator, including the auxiliary heads used only in training.
#[derive(Clone, Debug, PartialEq)]
pub struct Lra {
    pub config: LraConfig,
    joints: usize,
    pose_dim: usize,
    cond_dim: usize,
    tracked: [usize; TRACKED],
    pub embed: Linear,
    pub mask_token: Array,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Norm,
    pub joint_head: Linear,
    pub to_latent: Mlp,
    pub to_pose: Mlp,
    pub mu_head: Mlp,
    pub sigma_head: Mlp,
    pub cond_mean: Array,
    pub cond_std: Array,
}

impl Lra {
    pub fn new<R: Rng>(skel: &Skeleton, cond_dim: usize, config: &LraConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let e = config.embed;
        let gm = config.groups * config.categories;
        let d = skel.pose_dim();
        let hh = config.head_hidden;
        let lk = Activation::LeakyRelu;
        Ok(Self {
            config: config.clone(),
            joints: skel.joint_count(),
            pose_dim: d,
            cond_dim,
            tracked: skel.tracked(),
            embed: Linear::new(JOINT_FEATURE_DIM, e, rng),
            mask_token: Array::new(vec![e], (0..e).map(|_| rng.random_range(-0.1..0.1)).collect())?,
            layers: (0..config.layers).map(|_| EncoderLayer::new(e, config.feedforward, rng)).collect(),
            final_norm: Norm::new(e),
            joint_head: Linear::new(e, JOINT_FEATURE_DIM, rng),
            to_latent: Mlp::new(&[TRACKED * e + cond_dim, hh, gm], lk, Activation::Identity, false, rng),
            to_pose: Mlp::new(&[gm + cond_dim, hh, d], lk, Activation::Identity, false, rng),
            mu_head: Mlp::new(&[gm + cond_dim, hh, d], lk, Activation::Identity, false, rng),
            sigma_head: Mlp::new(&[gm + cond_dim, hh, d], lk, Activation::Identity, false, rng),
            cond_mean: Array::zeros(&[cond_dim]),
            cond_std: Array::full(&[cond_dim], 1.0)?,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn tracked(&self) -> [usize; TRACKED] {
        self.tracked
    }

    /// Standardizes raw conditions; entries of hidden hands are zeroed
    /// afterwards, i.e. set to the training mean. `hidden[r] = [left, right]`.
    pub fn prepare_condition(&self, raw: &[f64], hidden: &[[bool; 2]]) -> Vec<f64> {
        let w = self.cond_dim;
        let mut c = crate::flow::standardize_with(raw, self.cond_mean.data(), self.cond_std.data());
        for (r, h) in hidden.iter().enumerate() {
            for (k, &hid) in h.iter().enumerate() {
                if hid {
                    let start = r * w + (k + 1) * JOINT_FEATURE_DIM;
                    c[start..start + JOINT_FEATURE_DIM].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        c
    }

    pub fn bind(&self, t: &mut Tape, train: bool, reg: &mut Vec<Var>) -> BoundLra {
        let embed = self.embed.bind(t, train, reg);
        let mask_token = t.leaf(self.mask_token.clone(), train);
        if train {
            reg.push(mask_token);
        }
        BoundLra {
            config: self.config.clone(),
            joints: self.joints,
            tracked: self.tracked,
            embed,
            mask_token,
            layers: self.layers.iter().map(|l| l.bind(t, train, reg)).collect(),
            final_norm: self.final_norm.bind(t, train, reg),
            joint_head: self.joint_head.bind(t, train, reg),
            to_latent: self.to_latent.bind(t, train, reg),
            to_pose: self.to_pose.bind(t, train, reg),
            mu_head: self.mu_head.bind(t, train, reg),
            sigma_head: self.sigma_head.bind(t, train, reg),
        }
    }

    /// Latent regions and predicted joint tokens for `n` inputs, without
    /// Gumbel sampling.
    pub fn infer(&self, input: &LraInput) -> Result<LraInference> {
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let b = self.bind(&mut t, false, &mut reg);
        let out = b.forward(&mut t, input, None, false)?;
        let d = self.pose_dim;
        let mu = t.value(out.mu).data();
        let sigma = t.value(out.sigma).data();
        let regions = (0..input.n)
            .map(|r| LatentRegion {
                mu: mu[r * d..(r + 1) * d].to_vec(),
                sigma: sigma[r * d..(r + 1) * d].to_vec(),
            })
            .collect();
        Ok(LraInference {
            regions,
            joint_predictions: t.value(out.joint_pred).data().to_vec(),
            logits: t.value(out.logits).data().to_vec(),
        })
    }
}

impl Module for Lra {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array)) {
        self.embed.visit(&format!("{prefix}embed"), f);
        f(format!("{prefix}mask_token"), &self.mask_token);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layers.{i}"), f);
        }
        self.final_norm.visit(&format!("{prefix}final_norm"), f);
        self.joint_head.visit(&format!("{prefix}joint_head"), f);
        self.to_latent.visit(&format!("{prefix}to_latent"), f);
        self.to_pose.visit(&format!("{prefix}to_pose"), f);
        self.mu_head.visit(&format!("{prefix}mu_head"), f);
        self.sigma_head.visit(&format!("{prefix}sigma_head"), f);
        f(format!("{prefix}cond_mean"), &self.cond_mean);
        f(format!("{prefix}cond_std"), &self.cond_std);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array)) {
        self.embed.visit_mut(&format!("{prefix}embed"), f);
        f(format!("{prefix}mask_token"), &mut self.mask_token);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}layers.{i}"), f);
        }
        self.final_norm.visit_mut(&format!("{prefix}final_norm"), f);
        self.joint_head.visit_mut(&format!("{prefix}joint_head"), f);
        self.to_latent.visit_mut(&format!("{prefix}to_latent"), f);
        self.to_pose.visit_mut(&format!("{prefix}to_pose"), f);
        self.mu_head.visit_mut(&format!("{prefix}mu_head"), f);
        self.sigma_head.visit_mut(&format!("{prefix}sigma_head"), f);
        f(format!("{prefix}cond_mean"), &mut self.cond_mean);
        f(format!("{prefix}cond_std"), &mut self.cond_std);
    }
}

/// One batch of encoder input.
#[derive(Clone, Debug)]
pub struct LraInput {
    pub n: usize,
    /// `[n * J * 9]` joint tokens; entries of masked joints are ignored.
    pub tokens: Vec<f64>,
    /// `[n * J]`, true where the joint is replaced by the mask token.
    pub masked: Vec<bool>,
    /// `[n * cond_dim]`, already prepared by [`Lra::prepare_condition`].
    pub cond: Vec<f64>,
}

impl LraInput {
    /// Input where only the tracked joints are visible, with their tokens
    /// taken from the raw condition; `hidden` hides individual hands.
    pub fn from_conditions(lra: &Lra, raw: &[f64], hidden: &[[bool; 2]]) -> Self {
        let (j, w) = (lra.joints, lra.cond_dim);
        let n = raw.len() / w;
        let mut tokens = vec![0.0; n * j * JOINT_FEATURE_DIM];
        let mut masked = vec![true; n * j];
        for r in 0..n {
            for (k, &t) in lra.tracked.iter().enumerate() {
                let hid = k > 0 && hidden[r][k - 1];
                if !hid {
                    masked[r * j + t] = false;
                    let src = &raw[r * w + k * JOINT_FEATURE_DIM..r * w + (k + 1) * JOINT_FEATURE_DIM];
                    let dst = (r * j + t) * JOINT_FEATURE_DIM;
                    tokens[dst..dst + JOINT_FEATURE_DIM].copy_from_slice(src);
                }
            }
        }
        Self { n, tokens, masked, cond: lra.prepare_condition(raw, hidden) }
    }
}

pub struct LraInference {
    pub regions: Vec<LatentRegion>,
    /// `[n * J * 9]` predicted joint tokens.
    pub joint_predictions: Vec<f64>,
    /// `[n * G * M]`.
    pub logits: Vec<f64>,
}

pub struct BoundLayer {
    norm1: (Var, Var),
    query: BoundLinear,
    key: BoundLinear,
    value: BoundLinear,
    out: BoundLinear,
    norm2: (Var, Var),
    ff1: BoundLinear,
    ff2: BoundLinear,
}

/// Tape outputs of a forward pass.
pub struct LraOutputs {
    /// `[n * J, E]`.
    pub features: Var,
    /// Per layer and head, `[n, J, J]` attention weights.
    pub attention: Vec<Var>,
    /// `[n * J, 9]`.
    pub joint_pred: Var,
    /// `[n, 3E]`.
    pub pooled: Var,
    /// `[n * G, M]`.
    pub logits: Var,
    /// `[n, G * M]` relaxed Gumbel code, when sampled.
    pub code: Option<Var>,
    /// `[n, D]`, when a code was sampled.
    pub pose: Option<Var>,
    pub mu: Var,
    pub sigma: Var,
}

pub struct BoundLra {
    config: LraConfig,
    joints: usize,
    tracked: [usize; TRACKED],
    embed: BoundLinear,
    mask_token: Var,
    layers: Vec<BoundLayer>,
    final_norm: (Var, Var),
    joint_head: BoundLinear,
    to_latent: BoundMlp,
    to_pose: BoundMlp,
    mu_head: BoundMlp,
    sigma_head: BoundMlp,
}

fn norm(t: &mut Tape, x: Var, (g, b): (Var, Var)) -> Result<Var> {
    let h = t.layer_norm(x, LN_EPS)?;
    let h = t.mul(h, g)?;
    Ok(t.add(h, b)?)
}

impl BoundLra {
    /// Encoder stack over masked tokens; returns `[n * J, E]` features and
    /// attention maps. With `hard_key_mask`, no query attends to a masked joint.
    pub fn encode(&self, t: &mut Tape, input: &LraInput, hard_key_mask: bool) -> Result<(Var, Vec<Var>)> {
        let pe = positional_encoding(self.joints, self.config.embed);
        self.encode_with_positions(t, input, &pe, hard_key_mask)
    }

    /// [`Self::encode`] with caller-supplied `[J, E]` positional encodings.
    pub fn encode_with_positions(
        &self,
        t: &mut Tape,
        input: &LraInput,
        positions: &[f64],
        hard_key_mask: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let (n, j, e) = (input.n, self.joints, self.config.embed);
        if input.tokens.len() != n * j * JOINT_FEATURE_DIM || input.masked.len() != n * j {
            return Err(FlagError::Dimension("encoder input does not match the skeleton".into()));
        }
        for r in 0..n {
            if self.tracked.iter().all(|&k| input.masked[r * j + k]) {
                return Err(FlagError::Invalid("every observed joint is masked".into()));
            }
        }
        let rows = n * j;
        let mut tok = input.tokens.clone();
        let mut keep = vec![0.0; rows * e];
        let mut drop = vec![0.0; rows * e];
        for (i, &m) in input.masked.iter().enumerate() {
            if m {
                tok[i * JOINT_FEATURE_DIM..(i + 1) * JOINT_FEATURE_DIM].iter_mut().for_each(|v| *v = 0.0);
                drop[i * e..(i + 1) * e].iter_mut().for_each(|v| *v = 1.0);
            } else {
                keep[i * e..(i + 1) * e].iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let tokv = t.constant(Array::new(vec![rows, JOINT_FEATURE_DIM], tok)?);
        let keepv = t.constant(Array::new(vec![rows, e], keep)?);
        let dropv = t.constant(Array::new(vec![rows, e], drop)?);
        let emb = self.embed.forward(t, tokv)?;
        let emb = t.mul(emb, keepv)?;
        let mt = t.broadcast(self.mask_token, &[rows])?;
        let mt = t.mul(mt, dropv)?;
        let h = t.add(emb, mt)?;
        let h = t.reshape(h, &[n, j, e])?;
        let pe = t.constant(Array::new(vec![j, e], positions.to_vec())?);
        let h = t.add(h, pe)?;
        let mut h = t.reshape(h, &[rows, e])?;

        let key_mask = if hard_key_mask {
            let mut m = vec![0.0; n * j * j];
            for r in 0..n {
                for q in 0..j {
                    for k in 0..j {
                        if input.masked[r * j + k] {
                            m[(r * j + q) * j + k] = KEY_MASK_PENALTY;
                        }
                    }
                }
            }
            Some(t.constant(Array::new(vec![n, j, j], m)?))
        } else {
            None
        };

        let heads = self.config.heads;
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::new();
        for layer in &self.layers {
            let a = norm(t, h, layer.norm1)?;
            let q = layer.query.forward(t, a)?;
            let q = t.reshape(q, &[n, j, e])?;
            let k = layer.key.forward(t, a)?;
            let k = t.reshape(k, &[n, j, e])?;
            let v = layer.value.forward(t, a)?;
            let v = t.reshape(v, &[n, j, e])?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = t.slice(q, 2, hd * dh, (hd + 1) * dh)?;
                let kh = t.slice(k, 2, hd * dh, (hd + 1) * dh)?;
                let vh = t.slice(v, 2, hd * dh, (hd + 1) * dh)?;
                let kt = t.transpose(kh)?;
                let s = t.matmul(qh, kt)?;
                let mut s = t.scale(s, scale)?;
                if let Some(km) = key_mask {
                    s = t.add(s, km)?;
                }
                let att = t.softmax(s, 2)?;
                attention.push(att);
                outs.push(t.matmul(att, vh)?);
            }
            let o = t.concat(&outs, 2)?;
            let o = t.reshape(o, &[rows, e])?;
            let o = layer.out.forward(t, o)?;
            h = t.add(h, o)?;
            let a2 = norm(t, h, layer.norm2)?;
            let f = layer.ff1.forward(t, a2)?;
            let f = t.relu(f)?;
            let f = layer.ff2.forward(t, f)?;
            h = t.add(h, f)?;
        }
        let h = norm(t, h, self.final_norm)?;
        Ok((h, attention))
    }

    /// Concatenated (head, left hand, right hand) features, `[n, 3E]`.
    pub fn pool(&self, t: &mut Tape, features: Var, n: usize) -> Result<Var> {
        let idx: Vec<usize> =
            (0..n).flat_map(|r| self.tracked.iter().map(move |&k| r * self.joints + k)).collect();
        let g = t.gather(features, &idx)?;
        Ok(t.reshape(g, &[n, TRACKED * self.config.embed])?)
    }

    /// Full forward pass. With `gumbel = Some(noise)` (`[n * G * M]`) a relaxed
    /// code is sampled and decoded to pose space.
    pub fn forward(
        &self,
        t: &mut Tape,
        input: &LraInput,
        gumbel: Option<&[f64]>,
        hard_key_mask: bool,
    ) -> Result<LraOutputs> {
        let n = input.n;
        let (g, m) = (self.config.groups, self.config.categories);
        let (features, attention) = self.encode(t, input, hard_key_mask)?;
        let joint_pred = self.joint_head.forward(t, features)?;
        let pooled = self.pool(t, features, n)?;
        let c = t.constant(Array::new(vec![n, input.cond.len() / n.max(1)], input.cond.clone())?);
        let li = t.concat(&[pooled, c], 1)?;
        let logits = self.to_latent.forward(t, li)?;
        let logits = t.reshape(logits, &[n * g, m])?;
        let probs = t.softmax(logits, 1)?;
        let probs = t.reshape(probs, &[n, g * m])?;

        let (code, pose) = match gumbel {
            Some(noise) => {
                let nv = t.constant(Array::new(vec![n * g, m], noise.to_vec())?);
                let y = t.add(logits, nv)?;
                let y = t.scale(y, 1.0 / self.config.tau)?;
                let y = t.softmax(y, 1)?;
                let y = t.reshape(y, &[n, g * m])?;
                let pi = t.concat(&[y, c], 1)?;
                (Some(y), Some(self.to_pose.forward(t, pi)?))
            }
            None => (None, None),
        };

        let hi = t.concat(&[probs, c], 1)?;
        let mu = self.mu_head.forward(t, hi)?;
        let sp = self.sigma_head.forward(t, hi)?;
        let sp = t.softplus(sp)?;
        let sigma = t.add_scalar(sp, SIGMA_FLOOR)?;
        Ok(LraOutputs { features, attention, joint_pred, pooled, logits, code, pose, mu, sigma })
    }
}

/// Masked-joint prediction loss: per-sample sum over masked joints of the
/// squared token error, averaged over the batch. `pred` is `[n * J, 9]`.
pub fn mjp_loss(t: &mut Tape, pred: Var, target: &[f64], masked: &[bool], n: usize) -> Result<Var> {
    let mut w = vec![0.0; masked.len() * JOINT_FEATURE_DIM];
    for (i, &m) in masked.iter().enumerate() {
        if m {
            w[i * JOINT_FEATURE_DIM..(i + 1) * JOINT_FEATURE_DIM].iter_mut().for_each(|v| *v = 1.0);
        }
    }
    let shape = t.shape(pred).to_vec();
    let tv = t.constant(Array::new(shape.clone(), target.to_vec())?);
    let wv = t.constant(Array::new(shape, w)?);
    let d = t.sub(pred, tv)?;
    let sq = t.square(d)?;
    let sq = t.mul(sq, wv)?;
    let s = t.sum_all(sq)?;
    Ok(t.scale(s, 1.0 / n as f64)?)
}

/// Reconstruction loss `mean ||pred - target||^2` over rows of `pred`.
pub fn rec_loss(t: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let shape = t.shape(pred).to_vec();
    let n = shape[0];
    let tv = t.constant(Array::new(shape, target.to_vec())?);
    let d = t.sub(pred, tv)?;
    let sq = t.square(d)?;
    let s = t.sum_all(sq)?;
    Ok(t.scale(s, 1.0 / n as f64)?)
}

/// Weights inside the region loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionWeights {
    pub alpha_nll: f64,
    pub alpha_rec: f64,
    pub alpha_reg: f64,
}

impl Default for RegionWeights {
    fn default() -> Self {
        Self { alpha_nll: 1.0, alpha_rec: 0.5, alpha_reg: 0.25 }
    }
}

/// Region loss averaged over rows:
/// `-a_nll log N(z*; mu, sigma^2) + a_rec ||mu - z*||^2 - a_reg sum(1 + ln sigma - sigma)`.
pub fn lra_loss(t: &mut Tape, mu: Var, sigma: Var, z_star: &[f64], w: &RegionWeights) -> Result<Var> {
    let shape = t.shape(mu).to_vec();
    let (n, d) = (shape[0], shape[1]);
    let zs = t.constant(Array::new(shape, z_star.to_vec())?);
    let diff = t.sub(zs, mu)?;
    let std = t.div(diff, sigma)?;
    let sq = t.square(std)?;
    let half = t.scale(sq, 0.5)?;
    let ls = t.log(sigma)?;
    let nll = t.add(half, ls)?;
    let nll = t.sum_all(nll)?;
    let nll = t.add_scalar(nll, 0.5 * (n * d) as f64 * (2.0 * PI).ln())?;
    let dsq = t.square(diff)?;
    let rec = t.sum_all(dsq)?;
    let r = t.sub(ls, sigma)?;
    let r = t.add_scalar(r, 1.0)?;
    let reg = t.sum_all(r)?;
    let a = t.scale(nll, w.alpha_nll)?;
    let b = t.scale(rec, w.alpha_rec)?;
    let c = t.scale(reg, -w.alpha_reg)?;
    let total = t.add(a, b)?;
    let total = t.add(total, c)?;
    Ok(t.scale(total, 1.0 / n as f64)?)
}

/// Plain evaluation of [`lra_loss`] for one row.
pub fn lra_loss_value(mu: &[f64], sigma: &[f64], z_star: &[f64], w: &RegionWeights) -> f64 {
    let region = LatentRegion { mu: mu.to_vec(), sigma: sigma.to_vec() };
    let rec: f64 = mu.iter().zip(z_star).map(|(m, z)| (m - z).powi(2)).sum();
    let reg: f64 = sigma.iter().map(|s| 1.0 + s.ln() - s).sum();
    -w.alpha_nll * region.log_density(z_star) + w.alpha_rec * rec - w.alpha_reg * reg
}

/// Helper for softplus-parameterized deviations outside a tape.
pub fn sigma_from_preactivation(x: f64) -> f64 {
    softplus(x) + SIGMA_FLOOR
}
