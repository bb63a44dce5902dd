//! Two-stage optimization: the flow on likelihood, then the region
//! approximator (and the MLP baseline) against the frozen flow's oracle latents.

use diffmath::{Array, Tape, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{FlagError, Result};
use crate::flow::{column_stats, standardize_with, FlowConfig, FlowModel};
use crate::kinematics::{forward_kinematics, Skeleton, COND_DIM, JOINT_FEATURE_DIM};
use crate::lra::{full_mask, gumbel_noise, lra_loss, mask_schedule, mjp_loss, rec_loss, Lra, LraConfig, LraInput, RegionWeights};
use crate::nn::{collect_grads, Activation, Mlp, Module};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_nll: f64,
    pub lambda_mjp: f64,
    pub lambda_rec: f64,
    pub lambda_lra: f64,
    pub alpha_nll: f64,
    pub alpha_rec: f64,
    pub alpha_reg: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub flow_epochs: usize,
    pub lra_epochs: usize,
    pub mlp_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    /// Intermediate supervision on the taps listed in `flow.taps`.
    pub intermediate_supervision: bool,
    pub curriculum: bool,
    pub hand_dropout: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub validation_fraction: f64,
    pub mlp_hidden: usize,
    pub flow: FlowConfig,
    pub lra: LraConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_nll: 1.0,
            lambda_mjp: 1.0,
            lambda_rec: 1.0,
            lambda_lra: 1.0,
            alpha_nll: 1.0,
            alpha_rec: 0.5,
            alpha_reg: 0.25,
            learning_rate: 1e-4,
            batch_size: 256,
            flow_epochs: 10,
            lra_epochs: 10,
            mlp_epochs: 10,
            finetune_epochs: 10,
            seed: 0,
            intermediate_supervision: true,
            curriculum: true,
            hand_dropout: 0.2,
            grad_clip: 10.0,
            validation_fraction: 0.05,
            mlp_hidden: 256,
            flow: FlowConfig::default(),
            lra: LraConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| FlagError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_nll,
            self.lambda_mjp,
            self.lambda_rec,
            self.lambda_lra,
            self.alpha_nll,
            self.alpha_rec,
            self.alpha_reg,
            self.grad_clip,
        ];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(FlagError::Config("loss weights and the gradient clip must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.hand_dropout) {
            return Err(FlagError::Config(format!("hand dropout {} outside [0, 1]", self.hand_dropout)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(FlagError::Config("validation fraction must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(FlagError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.mlp_hidden == 0 {
            return Err(FlagError::Config("batch size and MLP width must be positive".into()));
        }
        self.flow.validate()?;
        self.lra.validate()
    }

    /// Short hex digest of the configuration, echoed in metric reports.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("serializable config");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }

    pub fn region_weights(&self) -> RegionWeights {
        RegionWeights { alpha_nll: self.alpha_nll, alpha_rec: self.alpha_rec, alpha_reg: self.alpha_reg }
    }
}

/// Adam with bias correction; moments are allocated on the first step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(FlagError::Dimension("parameter and gradient layouts differ".into()));
        }
        self.begin(grads)?;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(k, p, g, lr);
        }
        Ok(())
    }

    /// Validates a gradient set and advances the step counter.
    fn begin(&mut self, grads: &[&[f64]]) -> Result<()> {
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(FlagError::Numeric("non-finite gradient".into()));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(FlagError::Dimension("parameter layout changed between Adam steps".into()));
        }
        self.step += 1;
        Ok(())
    }

    fn update(&mut self, k: usize, p: &mut [f64], g: &[f64], lr: f64) {
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m[k], &mut self.v[k]);
        for i in 0..g.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Condition standardizers are statistics, not trainable weights.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with("cond_mean") || name.ends_with("cond_std"))
}

/// Rescales `grads` in place so their global norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= k));
    }
    norm
}

fn apply_update<M: Module>(model: &mut M, adam: &mut Adam, grads: &[Array], lr: f64) -> Result<()> {
    let mut sizes = Vec::with_capacity(grads.len());
    model.visit("", &mut |name, a| {
        if is_trainable(&name) {
            sizes.push(a.len());
        }
    });
    if sizes.len() != grads.len() || sizes.iter().zip(grads).any(|(s, g)| *s != g.len()) {
        return Err(FlagError::Dimension(format!("{} trainable arrays, {} gradients", sizes.len(), grads.len())));
    }
    let g: Vec<&[f64]> = grads.iter().map(|a| a.data()).collect();
    adam.begin(&g)?;
    let mut k = 0;
    model.visit_mut("", &mut |name, a| {
        if is_trainable(&name) {
            adam.update(k, a.data_mut(), g[k], lr);
            k += 1;
        }
    });
    Ok(())
}

fn check_finite(loss: f64, stage: &str, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(FlagError::Numeric(format!("{stage}: loss became {loss} at epoch {epoch}, batch {batch}")))
    }
}

/// Seeded split of `0..n` into (train, validation) indices.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5_1117));
    let nv = ((n as f64) * fraction).floor() as usize;
    let val = idx[..nv].to_vec();
    let mut train = idx[nv..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

fn epoch_rng(seed: u64, stage: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng.set_word_pos((epoch as u128) << 40);
    rng
}

fn gather_rows(src: &[f64], width: usize, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| src[i * width..(i + 1) * width].iter().copied()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_nll: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FlowRun {
    pub model: FlowModel,
    /// Training-set NLL (taps excluded) before the first update.
    pub initial_nll: f64,
    pub history: Vec<FlowEpoch>,
}

/// Stage one: maximum likelihood with optional intermediate supervision.
pub fn train_flow(cfg: &TrainConfig, data: &Dataset, log: &mut dyn FnMut(&FlowEpoch)) -> Result<FlowRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(FlagError::Invalid("cannot train on an empty dataset".into()));
    }
    let poses = data.poses();
    let conds = data.conditions();
    let d = poses.len() / data.len();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FlowModel::new(d, COND_DIM, &cfg.flow, &mut init_rng)?;
    let (train, val) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
    let (tx, tc) = (gather_rows(&poses, d, &train), gather_rows(&conds, COND_DIM, &train));
    let (vx, vc) = (gather_rows(&poses, d, &val), gather_rows(&conds, COND_DIM, &val));
    model.fit_standardizer(&tc)?;
    let initial_nll = chunked_nll(&model, &tx, &tc, false)?;

    let taps = cfg.intermediate_supervision;
    let mut adam = Adam::default();
    let mut history = Vec::with_capacity(cfg.flow_epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.flow_epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, 1, epoch));
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let n = chunk.len();
            let mut t = Tape::new();
            let mut reg = Vec::new();
            let bound = model.bind(&mut t, true, &mut reg);
            let x = t.constant(Array::new(vec![n, d], gather_rows(&tx, d, chunk))?);
            let c = bound.condition(&mut t, &gather_rows(&tc, COND_DIM, chunk))?;
            let nll = bound.nll_loss(&mut t, x, c, taps)?;
            let loss = t.scale(nll, cfg.lambda_nll)?;
            let value = t.value(loss).item()?;
            check_finite(value, "flow", epoch, b)?;
            let grads = t.backward(loss)?;
            let mut g = collect_grads(&grads, &reg)?;
            clip_global_norm(&mut g, cfg.grad_clip);
            apply_update(&mut model, &mut adam, &g, cfg.learning_rate)?;
            sum += value * n as f64;
            count += n;
        }
        let validation_nll = if val.is_empty() { None } else { Some(chunked_nll(&model, &vx, &vc, false)?) };
        if let Some(v) = validation_nll {
            check_finite(v, "flow validation", epoch, 0)?;
        }
        let rec = FlowEpoch { epoch, train_loss: sum / count as f64, validation_nll };
        log(&rec);
        history.push(rec);
    }
    Ok(FlowRun { model, initial_nll, history })
}

/// Mean NLL over many rows, evaluated in chunks.
pub fn chunked_nll(model: &FlowModel, x: &[f64], c: &[f64], taps: bool) -> Result<f64> {
    let d = model.pose_dim();
    let n = x.len() / d;
    let mut total = 0.0;
    for start in (0..n).step_by(1024) {
        let end = (start + 1024).min(n);
        let m = end - start;
        total += model.nll(&x[start * d..end * d], &c[start * COND_DIM..end * COND_DIM], m, taps)? * m as f64;
    }
    Ok(total / n as f64)
}

/// Oracle latents `z* = f^-1(x, c)` for every record, `[n * D]`.
pub fn oracle_latents(flow: &FlowModel, data: &Dataset) -> Result<Vec<f64>> {
    let (x, c) = (data.poses(), data.conditions());
    let d = flow.pose_dim();
    if x.len() != data.len() * d {
        return Err(FlagError::Dimension("flow and dataset pose sizes differ".into()));
    }
    let mut out = Vec::with_capacity(x.len());
    for start in (0..data.len()).step_by(1024) {
        let end = (start + 1024).min(data.len());
        out.extend(flow.inverse(&x[start * d..end * d], &c[start * COND_DIM..end * COND_DIM], end - start)?);
    }
    Ok(out)
}

/// Every joint's 9-D feature for every record, `[n * J * 9]`.
pub fn joint_tokens(skel: &Skeleton, data: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len() * skel.joint_count() * JOINT_FEATURE_DIM);
    for r in &data.records {
        let st = forward_kinematics(skel, &r.pose, &r.beta)?;
        for f in st.features() {
            out.extend_from_slice(&f);
        }
    }
    Ok(out)
}

/// Independent per-hand drop decisions, `[left, right]` per row.
pub fn hand_dropout_mask<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<[bool; 2]> {
    (0..n).map(|_| [rng.random_bool(p), rng.random_bool(p)]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LraEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub mjp: f64,
    pub rec: f64,
    pub lra: f64,
    /// Region loss on the validation split with every untracked joint masked.
    pub validation_lra: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LraRun {
    pub model: Lra,
    pub history: Vec<LraEpoch>,
}

/// Loss terms of one batch, each already averaged over rows.
pub struct LraTerms {
    pub total: Var,
    pub mjp: Var,
    pub rec: Var,
    pub lra: Var,
}

/// Assembles the stage-two objective for a prepared batch.
#[allow(clippy::too_many_arguments)]
pub fn lra_objective(
    t: &mut Tape,
    lra: &crate::lra::BoundLra,
    cfg: &TrainConfig,
    input: &LraInput,
    tokens: &[f64],
    poses: &[f64],
    z_star: &[f64],
    gumbel: &[f64],
) -> Result<LraTerms> {
    let out = lra.forward(t, input, Some(gumbel), false)?;
    let mjp = mjp_loss(t, out.joint_pred, tokens, &input.masked, input.n)?;
    let rec = rec_loss(t, out.pose.expect("code sampled"), poses)?;
    let reg = lra_loss(t, out.mu, out.sigma, z_star, &cfg.region_weights())?;
    let a = t.scale(mjp, cfg.lambda_mjp)?;
    let b = t.scale(rec, cfg.lambda_rec)?;
    let c = t.scale(reg, cfg.lambda_lra)?;
    let total = t.add(a, b)?;
    let total = t.add(total, c)?;
    Ok(LraTerms { total, mjp, rec, lra: reg })
}

struct LraData {
    tokens: Vec<f64>,
    poses: Vec<f64>,
    conds: Vec<f64>,
    z_star: Vec<f64>,
}

impl LraData {
    fn new(skel: &Skeleton, flow: &FlowModel, data: &Dataset) -> Result<Self> {
        Ok(Self {
            tokens: joint_tokens(skel, data)?,
            poses: data.poses(),
            conds: data.conditions(),
            z_star: oracle_latents(flow, data)?,
        })
    }
}

fn build_input(
    lra: &Lra,
    tokens: &[f64],
    raw: &[f64],
    n: usize,
    masked_joints: &[usize],
    hidden: &[[bool; 2]],
) -> LraInput {
    let j = lra.joint_count();
    let tracked = lra.tracked();
    let mut masked = vec![false; n * j];
    for r in 0..n {
        for &m in masked_joints {
            masked[r * j + m] = true;
        }
        for (k, &h) in hidden[r].iter().enumerate() {
            if h {
                masked[r * j + tracked[k + 1]] = true;
            }
        }
    }
    LraInput { n, tokens: tokens.to_vec(), masked, cond: lra.prepare_condition(raw, hidden) }
}

/// Validation region loss with every untracked joint masked and both hands visible.
pub fn region_loss(lra: &Lra, cfg: &TrainConfig, conds: &[f64], z_star: &[f64]) -> Result<f64> {
    let n = conds.len() / COND_DIM;
    let d = lra.pose_dim();
    let mut total = 0.0;
    for start in (0..n).step_by(512) {
        let end = (start + 512).min(n);
        let m = end - start;
        let input = LraInput::from_conditions(lra, &conds[start * COND_DIM..end * COND_DIM], &vec![[false; 2]; m]);
        let mut t = Tape::new();
        let bound = lra.bind(&mut t, false, &mut Vec::new());
        let out = bound.forward(&mut t, &input, None, false)?;
        let l = lra_loss(&mut t, out.mu, out.sigma, &z_star[start * d..end * d], &cfg.region_weights())?;
        total += t.value(l).item()? * m as f64;
    }
    Ok(total / n as f64)
}

#[allow(clippy::too_many_arguments)]
fn run_lra_epochs(
    model: &mut Lra,
    cfg: &TrainConfig,
    train: &LraData,
    val: Option<&LraData>,
    epochs: usize,
    stage: u64,
    schedule: &dyn Fn(usize) -> Vec<usize>,
    dropout: f64,
    log: &mut dyn FnMut(&LraEpoch),
) -> Result<Vec<LraEpoch>> {
    let n = train.conds.len() / COND_DIM;
    let (d, j) = (model.pose_dim(), model.joint_count());
    let tw = j * JOINT_FEATURE_DIM;
    let gm = cfg.lra.groups * cfg.lra.categories;
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = epoch_rng(cfg.seed, stage, epoch);
        order.shuffle(&mut rng);
        let masked_joints = schedule(epoch);
        let mut sums = [0.0; 4];
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let m = chunk.len();
            let tokens = gather_rows(&train.tokens, tw, chunk);
            let raw = gather_rows(&train.conds, COND_DIM, chunk);
            let hidden = if dropout > 0.0 { hand_dropout_mask(m, dropout, &mut rng) } else { vec![[false; 2]; m] };
            let input = build_input(model, &tokens, &raw, m, &masked_joints, &hidden);
            let gumbel = gumbel_noise(m * gm, &mut rng);
            let mut t = Tape::new();
            let mut reg = Vec::new();
            let bound = model.bind(&mut t, true, &mut reg);
            let terms = lra_objective(
                &mut t,
                &bound,
                cfg,
                &input,
                &tokens,
                &gather_rows(&train.poses, d, chunk),
                &gather_rows(&train.z_star, d, chunk),
                &gumbel,
            )?;
            let value = t.value(terms.total).item()?;
            check_finite(value, "region approximator", epoch, b)?;
            for (s, v) in sums.iter_mut().zip([terms.total, terms.mjp, terms.rec, terms.lra]) {
                *s += t.value(v).item()? * m as f64;
            }
            let grads = t.backward(terms.total)?;
            let mut g = collect_grads(&grads, &reg)?;
            clip_global_norm(&mut g, cfg.grad_clip);
            apply_update(model, &mut adam, &g, cfg.learning_rate)?;
        }
        let validation_lra = match val {
            Some(v) if !v.conds.is_empty() => Some(region_loss(model, cfg, &v.conds, &v.z_star)?),
            _ => None,
        };
        let k = n as f64;
        let rec = LraEpoch {
            epoch,
            loss: sums[0] / k,
            mjp: sums[1] / k,
            rec: sums[2] / k,
            lra: sums[3] / k,
            validation_lra,
        };
        log(&rec);
        history.push(rec);
    }
    Ok(history)
}

fn check_compatible(flow: &FlowModel, skel: &Skeleton) -> Result<()> {
    if flow.pose_dim() != skel.joint_count() * 3 || flow.cond_dim() != COND_DIM {
        return Err(FlagError::HashMismatch {
            expected: format!("flow over {} pose values", skel.joint_count() * 3),
            found: format!("flow over {} pose values", flow.pose_dim()),
        });
    }
    Ok(())
}

fn split_lra_data(
    skel: &Skeleton,
    flow: &FlowModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(LraData, Option<LraData>)> {
    let (train, val) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
    let train = LraData::new(skel, flow, &data.subset(&train))?;
    let val = if val.is_empty() { None } else { Some(LraData::new(skel, flow, &data.subset(&val))?) };
    Ok((train, val))
}

/// Stage two: the flow is only read, so its parameters cannot change.
pub fn train_lra(
    cfg: &TrainConfig,
    skel: &Skeleton,
    data: &Dataset,
    flow: &FlowModel,
    log: &mut dyn FnMut(&LraEpoch),
) -> Result<LraRun> {
    cfg.validate()?;
    check_compatible(flow, skel)?;
    if data.is_empty() {
        return Err(FlagError::Invalid("cannot train on an empty dataset".into()));
    }
    let (train, val) = split_lra_data(skel, flow, data, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x11A);
    let mut model = Lra::new(skel, COND_DIM, &cfg.lra, &mut rng)?;
    let (mean, std) = column_stats(&train.conds, COND_DIM)?;
    model.cond_mean = Array::vector(mean)?;
    model.cond_std = Array::vector(std)?;
    let epochs = cfg.lra_epochs;
    let schedule = |e: usize| if cfg.curriculum { mask_schedule(skel, e, epochs) } else { full_mask(skel) };
    let history = run_lra_epochs(&mut model, cfg, &train, val.as_ref(), epochs, 2, &schedule, 0.0, log)?;
    Ok(LraRun { model, history })
}

/// Continues training with every untracked joint masked and each hand
/// independently hidden with probability `p`.
pub fn finetune_hand_dropout(
    cfg: &TrainConfig,
    skel: &Skeleton,
    data: &Dataset,
    flow: &FlowModel,
    lra: &Lra,
    p: f64,
    epochs: usize,
    log: &mut dyn FnMut(&LraEpoch),
) -> Result<LraRun> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&p) {
        return Err(FlagError::Config(format!("dropout probability {p} outside [0, 1]")));
    }
    check_compatible(flow, skel)?;
    let (train, val) = split_lra_data(skel, flow, data, cfg)?;
    let mut model = lra.clone();
    let schedule = |_| full_mask(skel);
    let history = run_lra_epochs(&mut model, cfg, &train, val.as_ref(), epochs, 3, &schedule, p, log)?;
    Ok(LraRun { model, history })
}

/// Standalone perceptron from condition to latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBaseline {
    pub net: Mlp,
    pub cond_mean: Array,
    pub cond_std: Array,
}

impl MlpBaseline {
    pub fn new<R: Rng>(cond_dim: usize, hidden: usize, latent: usize, rng: &mut R) -> Self {
        Self {
            net: Mlp::new(&[cond_dim, hidden, latent], Activation::LeakyRelu, Activation::Identity, false, rng),
            cond_mean: Array::zeros(&[cond_dim]),
            cond_std: Array::full(&[cond_dim], 1.0).expect("finite"),
        }
    }

    /// Latent predictions for raw condition rows.
    pub fn predict(&self, raw: &[f64]) -> Vec<f64> {
        let c = standardize_with(raw, self.cond_mean.data(), self.cond_std.data());
        self.net.forward_rows(&c, raw.len() / self.net.input_dim())
    }
}

impl Module for MlpBaseline {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array)) {
        self.net.visit(&format!("{prefix}net"), f);
        f(format!("{prefix}cond_mean"), &self.cond_mean);
        f(format!("{prefix}cond_std"), &self.cond_std);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array)) {
        self.net.visit_mut(&format!("{prefix}net"), f);
        f(format!("{prefix}cond_mean"), &mut self.cond_mean);
        f(format!("{prefix}cond_std"), &mut self.cond_std);
    }
}

#[derive(Clone, Debug)]
pub struct MlpRun {
    pub model: MlpBaseline,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

/// Baseline trained with `mean ||z_hat - z*||^2`.
pub fn train_mlp_baseline(
    cfg: &TrainConfig,
    skel: &Skeleton,
    data: &Dataset,
    flow: &FlowModel,
    log: &mut dyn FnMut(usize, f64),
) -> Result<MlpRun> {
    cfg.validate()?;
    check_compatible(flow, skel)?;
    if data.is_empty() {
        return Err(FlagError::Invalid("cannot train on an empty dataset".into()));
    }
    let (train, _) = split_indices(data.len(), cfg.validation_fraction, cfg.seed);
    let data = data.subset(&train);
    let z_star = oracle_latents(flow, &data)?;
    let conds = data.conditions();
    let d = flow.pose_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3117);
    let mut model = MlpBaseline::new(COND_DIM, cfg.mlp_hidden, d, &mut rng);
    let (mean, std) = column_stats(&conds, COND_DIM)?;
    model.cond_mean = Array::vector(mean)?;
    model.cond_std = Array::vector(std)?;
    let cs = standardize_with(&conds, model.cond_mean.data(), model.cond_std.data());
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.mlp_epochs);
    for epoch in 0..cfg.mlp_epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, 4, epoch));
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let m = chunk.len();
            let mut t = Tape::new();
            let mut reg = Vec::new();
            let net = model.net.bind(&mut t, true, &mut reg);
            let c = t.constant(Array::new(vec![m, COND_DIM], gather_rows(&cs, COND_DIM, chunk))?);
            let pred = net.forward(&mut t, c)?;
            let loss = rec_loss(&mut t, pred, &gather_rows(&z_star, d, chunk))?;
            let value = t.value(loss).item()?;
            check_finite(value, "MLP baseline", epoch, b)?;
            sum += value * m as f64;
            let grads = t.backward(loss)?;
            let mut g = collect_grads(&grads, &reg)?;
            clip_global_norm(&mut g, cfg.grad_clip);
            apply_update(&mut model, &mut adam, &g, cfg.learning_rate)?;
        }
        let mean = sum / data.len() as f64;
        log(epoch, mean);
        history.push(mean);
    }
    Ok(MlpRun { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_complete() {
        let (a, b) = split_indices(100, 0.05, 3);
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Array::vector(vec![3.0, 4.0]).unwrap(), Array::vector(vec![12.0]).unwrap()];
        let n = clip_global_norm(&mut g, 1.3);
        assert!((n - 13.0).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|a| a.data()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 1.3).abs() < 1e-12);
    }

    #[test]
    fn buffers_are_not_trainable() {
        assert!(!is_trainable("cond_mean") && !is_trainable("lra.cond_std"));
        assert!(is_trainable("blocks.0.s.0.weight"));
    }
}
