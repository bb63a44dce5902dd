//! Metrics over trained models: MPJPE under different latent rules,
//! likelihoods of out-of-distribution poses, distances to oracle latents,
//! refinement traces and their CSV reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{ood_manipulate, ood_noise, random_untracked_joints, Dataset, PoseRanges};
use crate::error::{FlagError, Result};
use crate::flow::FlowModel;
use crate::kinematics::{forward_kinematics, Pose, Skeleton, COND_DIM, JOINT_FEATURE_DIM};
use crate::lra::{LatentRegion, Lra, LraInput};
use crate::refine::{refine_latent, refine_pose, Instance, LbfgsConfig, RefineObjective, Refinement};
use crate::training::{chunked_nll, oracle_latents, MlpBaseline};

const CHUNK: usize = 256;

/// Iterations at which refinement traces are sampled; 0 is the unrefined decode.
pub const TRACE_ITERATIONS: [usize; 6] = [0, 2, 5, 10, 25, 50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub subset: String,
    pub value: f64,
    pub count: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Rows in insertion order, all sharing a seed and configuration hash.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Self { seed, config_hash: config_hash.into(), rows: Vec::new() }
    }

    pub fn push(&mut self, metric: &str, subset: &str, value: f64, count: usize) -> Result<()> {
        if !value.is_finite() {
            return Err(FlagError::Numeric(format!("metric {metric}/{subset} is {value}")));
        }
        self.rows.push(MetricRow {
            metric: metric.into(),
            subset: subset.into(),
            value,
            count,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        });
        Ok(())
    }

    pub fn get(&self, metric: &str, subset: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.subset == subset).map(|r| r.value)
    }

    pub fn to_csv(&self) -> Result<String> {
        write_csv(&self.rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| FlagError::io(path, e))
    }
}

/// Header row plus one line per record.
pub fn write_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| FlagError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| FlagError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| FlagError::Format(e.to_string()))
}

/// Mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

pub fn summarize(v: &[f64]) -> Summary {
    let n = v.len();
    if n == 0 {
        return Summary { mean: f64::NAN, se: f64::NAN, count: 0 };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let se = if n < 2 {
        0.0
    } else {
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Summary { mean, se, count: n }
}

/// Summary of the per-sample differences `a - b`.
pub fn paired_gap(a: &[f64], b: &[f64]) -> Result<Summary> {
    if a.len() != b.len() {
        return Err(FlagError::Dimension("paired samples differ in length".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(summarize(&d))
}

/// Which hand observations are visible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hands {
    Both,
    Left,
    Right,
    None,
}

impl Hands {
    /// `[left hidden, right hidden]`.
    pub fn hidden(self) -> [bool; 2] {
        match self {
            Hands::Both => [false, false],
            Hands::Left => [false, true],
            Hands::Right => [true, false],
            Hands::None => [true, true],
        }
    }
}

impl FromStr for Hands {
    type Err = FlagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Hands::Both),
            "left" => Ok(Hands::Left),
            "right" => Ok(Hands::Right),
            "none" => Ok(Hands::None),
            _ => Err(FlagError::Invalid(format!("unknown hand visibility {s:?}"))),
        }
    }
}

/// How a latent code is chosen for each condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentRule {
    Mu,
    Zero,
    Mlp,
    Sample(usize),
}

impl LatentRule {
    pub fn name(self) -> String {
        match self {
            LatentRule::Mu => "mu".into(),
            LatentRule::Zero => "zero".into(),
            LatentRule::Mlp => "mlp".into(),
            LatentRule::Sample(k) => format!("sample-{k}"),
        }
    }
}

impl FromStr for LatentRule {
    type Err = FlagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu" => Ok(LatentRule::Mu),
            "zero" => Ok(LatentRule::Zero),
            "mlp" => Ok(LatentRule::Mlp),
            _ => match s.strip_prefix("sample-").map(str::parse::<usize>) {
                Some(Ok(k)) if k > 0 => Ok(LatentRule::Sample(k)),
                _ => Err(FlagError::Invalid(format!("unknown latent rule {s:?}"))),
            },
        }
    }
}

/// Trained models available to an evaluation.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub flow: &'a FlowModel,
    pub lra: Option<&'a Lra>,
    pub mlp: Option<&'a MlpBaseline>,
}

/// Latent regions for raw condition rows with the given hands hidden.
pub fn latent_regions(lra: &Lra, conds: &[f64], hands: Hands) -> Result<Vec<LatentRegion>> {
    let n = conds.len() / COND_DIM;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let input = LraInput::from_conditions(lra, &conds[start * COND_DIM..end * COND_DIM], &vec![hands.hidden(); end - start]);
        out.extend(lra.infer(&input)?.regions);
    }
    Ok(out)
}

/// Raw conditions with the entries of hidden hands replaced by the flow's
/// training mean, so nothing observed about a hidden hand reaches any model.
pub fn hide_hands(flow: &FlowModel, conds: &[f64], hands: Hands) -> Vec<f64> {
    let mut out = conds.to_vec();
    let mean = flow.cond_mean.data();
    for row in out.chunks_mut(COND_DIM) {
        for (k, &hid) in hands.hidden().iter().enumerate() {
            if hid {
                let span = (k + 1) * JOINT_FEATURE_DIM..(k + 2) * JOINT_FEATURE_DIM;
                row[span.clone()].copy_from_slice(&mean[span]);
            }
        }
    }
    out
}

/// Decodes `[n * D]` latents under raw conditions.
pub fn decode(flow: &FlowModel, z: &[f64], conds: &[f64]) -> Result<Vec<f64>> {
    let d = flow.pose_dim();
    let n = conds.len() / COND_DIM;
    if z.len() != n * d {
        return Err(FlagError::Dimension(format!("{} latent values for {n} conditions", z.len())));
    }
    let mut out = Vec::with_capacity(z.len());
    for start in (0..n).step_by(CHUNK * 4) {
        let end = (start + CHUNK * 4).min(n);
        out.extend(flow.forward(&z[start * d..end * d], &conds[start * COND_DIM..end * COND_DIM], end - start)?);
    }
    Ok(out)
}

/// Per-sample MPJPE in centimeters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseErrors {
    pub upper: Vec<f64>,
    pub full: Vec<f64>,
}

fn joint_positions(skel: &Skeleton, pose: &[f64], data: &Dataset, i: usize) -> Result<Vec<[f64; 3]>> {
    Ok(forward_kinematics(skel, &Pose::from_flat(pose)?, &data.records[i].beta)?.positions)
}

fn mean_distance(a: &[[f64; 3]], b: &[[f64; 3]], subset: &[usize]) -> f64 {
    let total: f64 = subset
        .iter()
        .map(|&j| ((a[j][0] - b[j][0]).powi(2) + (a[j][1] - b[j][1]).powi(2) + (a[j][2] - b[j][2]).powi(2)).sqrt())
        .sum();
    100.0 * total / subset.len() as f64
}

/// Errors of predicted poses `[n * D]` against the dataset's ground truth.
pub fn pose_errors(skel: &Skeleton, pred: &[f64], data: &Dataset) -> Result<PoseErrors> {
    let d = skel.pose_dim();
    if pred.len() != data.len() * d {
        return Err(FlagError::Dimension("prediction count differs from the dataset".into()));
    }
    let all = skel.all_joints();
    let mut out = PoseErrors::default();
    for (i, r) in data.records.iter().enumerate() {
        let p = joint_positions(skel, &pred[i * d..(i + 1) * d], data, i)?;
        let g = forward_kinematics(skel, &r.pose, &r.beta)?.positions;
        out.upper.push(mean_distance(&p, &g, skel.upper_body()));
        out.full.push(mean_distance(&p, &g, &all));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub errors: PoseErrors,
    /// Per-joint spread of sampled joint positions (cm), averaged over the
    /// test set; only for the sampling rule.
    pub joint_std: Option<Vec<f64>>,
}

/// Decodes every test condition with `rule` and measures the pose error.
/// The sampling rule averages the error over its `k` draws.
pub fn evaluate<R: Rng>(
    skel: &Skeleton,
    models: Models<'_>,
    data: &Dataset,
    rule: LatentRule,
    hands: Hands,
    rng: &mut R,
) -> Result<Evaluation> {
    let conds = hide_hands(models.flow, &data.conditions(), hands);
    let d = models.flow.pose_dim();
    let need_lra = || models.lra.ok_or_else(|| FlagError::Invalid(format!("rule {} needs an approximator", rule.name())));
    let z = match rule {
        LatentRule::Zero => vec![0.0; data.len() * d],
        LatentRule::Mlp => {
            let m = models.mlp.ok_or_else(|| FlagError::Invalid("rule mlp needs a baseline checkpoint".into()))?;
            m.predict(&conds)
        }
        LatentRule::Mu => latent_regions(need_lra()?, &conds, hands)?.into_iter().flat_map(|r| r.mu).collect(),
        LatentRule::Sample(k) => return evaluate_samples(skel, models.flow, need_lra()?, data, k, hands, rng),
    };
    let poses = decode(models.flow, &z, &conds)?;
    Ok(Evaluation { errors: pose_errors(skel, &poses, data)?, joint_std: None })
}

fn evaluate_samples<R: Rng>(
    skel: &Skeleton,
    flow: &FlowModel,
    lra: &Lra,
    data: &Dataset,
    k: usize,
    hands: Hands,
    rng: &mut R,
) -> Result<Evaluation> {
    let conds = hide_hands(flow, &data.conditions(), hands);
    let regions = latent_regions(lra, &conds, hands)?;
    let draws: Vec<Vec<Vec<f64>>> = regions.iter().map(|r| r.sample(k, rng)).collect();
    let (n, d, j) = (data.len(), flow.pose_dim(), skel.joint_count());
    let all = skel.all_joints();
    let mut errors = PoseErrors { upper: vec![0.0; n], full: vec![0.0; n] };
    // positions[i][s] for sample s of record i
    let mut positions = vec![Vec::with_capacity(k); n];
    for s in 0..k {
        let z: Vec<f64> = draws.iter().flat_map(|v| v[s].iter().copied()).collect();
        let poses = decode(flow, &z, &conds)?;
        for (i, r) in data.records.iter().enumerate() {
            let p = joint_positions(skel, &poses[i * d..(i + 1) * d], data, i)?;
            let g = forward_kinematics(skel, &r.pose, &r.beta)?.positions;
            errors.upper[i] += mean_distance(&p, &g, skel.upper_body()) / k as f64;
            errors.full[i] += mean_distance(&p, &g, &all) / k as f64;
            positions[i].push(p);
        }
    }
    let mut joint_std = vec![0.0; j];
    for ps in &positions {
        for (jj, slot) in joint_std.iter_mut().enumerate() {
            let mut mean = [0.0; 3];
            for p in ps {
                for a in 0..3 {
                    mean[a] += p[jj][a] / k as f64;
                }
            }
            let var: f64 = ps.iter().map(|p| (0..3).map(|a| (p[jj][a] - mean[a]).powi(2)).sum::<f64>()).sum::<f64>() / k as f64;
            *slot += 100.0 * var.sqrt() / n as f64;
        }
    }
    Ok(Evaluation { errors, joint_std: Some(joint_std) })
}

/// `|ood - gt| / max(ood, gt)`.
pub fn relative_difference(ood: f64, gt: f64) -> Result<f64> {
    let diff = (ood - gt).abs();
    if diff == 0.0 {
        return Ok(0.0);
    }
    let m = ood.max(gt);
    if m == 0.0 {
        return Err(FlagError::Degenerate("relative difference with a zero denominator".into()));
    }
    Ok(diff / m)
}

/// Out-of-distribution pose sets paired with the ground-truth records.
#[derive(Clone, Debug, PartialEq)]
pub struct OodSets {
    /// Ground truth with `joints` random untracked joints perturbed, `[n * D]`.
    pub manipulated: Vec<f64>,
    /// Uniform draws within the training ranges, `[n * D]`.
    pub noise: Vec<f64>,
}

pub fn build_ood_sets<R: Rng>(
    skel: &Skeleton,
    data: &Dataset,
    ranges: Option<&PoseRanges>,
    joints: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Result<OodSets> {
    let mut manipulated = Vec::with_capacity(data.len() * skel.pose_dim());
    let mut noise = Vec::with_capacity(data.len() * skel.pose_dim());
    for r in &data.records {
        let subset = random_untracked_joints(skel, joints, rng);
        manipulated.extend(ood_manipulate(&r.pose, &subset, noise_scale, rng)?.to_flat());
        noise.extend(ood_noise(ranges, rng)?.to_flat());
    }
    Ok(OodSets { manipulated, noise })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OodResult {
    pub nll_gt: f64,
    pub nll_manipulated: f64,
    pub nll_noise: f64,
    pub rd_manipulated: f64,
    pub rd_noise: f64,
}

/// Mean NLL of each set, all scored under the ground-truth records' conditions.
pub fn ood_eval(flow: &FlowModel, data: &Dataset, sets: &OodSets) -> Result<OodResult> {
    if data.is_empty() {
        return Err(FlagError::Invalid("out-of-distribution evaluation needs test records".into()));
    }
    let conds = data.conditions();
    let nll_gt = chunked_nll(flow, &data.poses(), &conds, false)?;
    let nll_manipulated = chunked_nll(flow, &sets.manipulated, &conds, false)?;
    let nll_noise = chunked_nll(flow, &sets.noise, &conds, false)?;
    Ok(OodResult {
        nll_gt,
        nll_manipulated,
        nll_noise,
        rd_manipulated: relative_difference(nll_manipulated, nll_gt)?,
        rd_noise: relative_difference(nll_noise, nll_gt)?,
    })
}

/// Mean cosine distance between paired rows, and the number of pairs with a
/// zero-norm member. Such pairs have no direction; their similarity is taken
/// as 0 (distance 1).
pub fn cosine_distance(candidates: &[f64], oracle: &[f64], d: usize) -> Result<(f64, usize)> {
    if candidates.len() != oracle.len() || d == 0 || oracle.is_empty() || oracle.len() % d != 0 {
        return Err(FlagError::Dimension("cosine distance needs equal, non-empty batches".into()));
    }
    let n = oracle.len() / d;
    let mut total = 0.0;
    let mut zero = 0;
    for (a, b) in candidates.chunks(d).zip(oracle.chunks(d)) {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            zero += 1;
            total += 1.0;
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        total += 1.0 - (dot / (na * nb)).clamp(-1.0, 1.0);
    }
    Ok((total / n as f64, zero))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub iterations: usize,
    /// Batches larger than this are split into consecutive chunks whose
    /// distances are averaged.
    pub max_batch: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, iterations: 200, max_batch: 500 }
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic optimal-transport value between two uniform point clouds with a
/// squared-Euclidean ground cost, from log-domain Sinkhorn potentials.
pub fn entropic_ot(a: &[f64], b: &[f64], d: usize, epsilon: f64, iterations: usize) -> Result<f64> {
    if d == 0 || a.is_empty() || b.is_empty() || a.len() % d != 0 || b.len() % d != 0 {
        return Err(FlagError::Dimension("Sinkhorn needs non-empty batches of whole rows".into()));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(FlagError::Invalid("Sinkhorn regularization must be positive".into()));
    }
    let (n, m) = (a.len() / d, b.len() / d);
    let mut cost = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            cost[i * m + j] = a[i * d..(i + 1) * d].iter().zip(&b[j * d..(j + 1) * d]).map(|(x, y)| (x - y).powi(2)).sum();
        }
    }
    let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..iterations.max(1) {
        for i in 0..n {
            f[i] = -epsilon * log_sum_exp((0..m).map(|j| lb + (g[j] - cost[i * m + j]) / epsilon));
        }
        for j in 0..m {
            g[j] = -epsilon * log_sum_exp((0..n).map(|i| la + (f[i] - cost[i * m + j]) / epsilon));
        }
    }
    // after the last update the plan has unit mass, so the dual value is exact
    let value = f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64;
    if !value.is_finite() {
        return Err(FlagError::Numeric("Sinkhorn value is not finite".into()));
    }
    Ok(value)
}

/// Debiased Sinkhorn divergence `OT(a, b) - OT(a, a) / 2 - OT(b, b) / 2`,
/// which vanishes for identical batches.
pub fn sinkhorn_divergence(a: &[f64], b: &[f64], d: usize, epsilon: f64, iterations: usize) -> Result<f64> {
    let ab = entropic_ot(a, b, d, epsilon, iterations)?;
    let aa = entropic_ot(a, a, d, epsilon, iterations)?;
    let bb = entropic_ot(b, b, d, epsilon, iterations)?;
    Ok(ab - 0.5 * (aa + bb))
}

/// Batch-level Sinkhorn distance after standardizing both batches with the
/// oracle batch's per-coordinate statistics.
pub fn sinkhorn_distance(candidates: &[f64], oracle: &[f64], d: usize, cfg: &SinkhornConfig) -> Result<f64> {
    if candidates.len() != oracle.len() || cfg.max_batch == 0 {
        return Err(FlagError::Dimension("Sinkhorn distance needs equal batches".into()));
    }
    let (mean, std) = crate::flow::column_stats(oracle, d)?;
    let a = crate::flow::standardize_with(candidates, &mean, &std);
    let b = crate::flow::standardize_with(oracle, &mean, &std);
    let n = oracle.len() / d;
    let mut total = 0.0;
    let mut chunks = 0;
    for start in (0..n).step_by(cfg.max_batch) {
        let end = (start + cfg.max_batch).min(n);
        total += sinkhorn_divergence(&a[start * d..end * d], &b[start * d..end * d], d, cfg.epsilon, cfg.iterations)?;
        chunks += 1;
    }
    Ok(total / chunks as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleDistances {
    /// (cosine distance, zero-norm pairs, Sinkhorn distance) per candidate set.
    pub random: (f64, usize, f64),
    pub zeros: (f64, usize, f64),
    pub mu: (f64, usize, f64),
    pub count: usize,
}

/// Distances from random draws, zero vectors and predicted region centers to
/// the oracle latents of the test set.
pub fn oracle_distance<R: Rng>(
    flow: &FlowModel,
    lra: &Lra,
    data: &Dataset,
    cfg: &SinkhornConfig,
    rng: &mut R,
) -> Result<OracleDistances> {
    let d = flow.pose_dim();
    let z_star = oracle_latents(flow, data)?;
    let random: Vec<f64> = (0..z_star.len()).map(|_| rng.sample(StandardNormal)).collect();
    let zeros = vec![0.0; z_star.len()];
    let mu: Vec<f64> = latent_regions(lra, &data.conditions(), Hands::Both)?.into_iter().flat_map(|r| r.mu).collect();
    let measure = |c: &[f64]| -> Result<(f64, usize, f64)> {
        let (cos, zero) = cosine_distance(c, &z_star, d)?;
        Ok((cos, zero, sinkhorn_distance(c, &z_star, d, cfg)?))
    };
    Ok(OracleDistances { random: measure(&random)?, zeros: measure(&zeros)?, mu: measure(&mu)?, count: data.len() })
}

/// One sampled point of a refinement trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub space: String,
    pub init_rule: String,
    pub instance: usize,
    pub iteration: usize,
    pub mpjpe_upper: f64,
    pub mpjpe_full: f64,
}

/// Samples a refinement at `iterations` against the ground-truth pose.
pub fn trace_rows(
    skel: &Skeleton,
    refinement: &Refinement,
    data: &Dataset,
    instance: usize,
    space: &str,
    init_rule: &str,
    iterations: &[usize],
) -> Result<Vec<TraceRow>> {
    let r = &data.records[instance];
    let g = forward_kinematics(skel, &r.pose, &r.beta)?.positions;
    let all = skel.all_joints();
    iterations
        .iter()
        .map(|&k| {
            let p = forward_kinematics(skel, &refinement.pose_at(k)?, &r.beta)?.positions;
            Ok(TraceRow {
                space: space.into(),
                init_rule: init_rule.into(),
                instance,
                iteration: k,
                mpjpe_upper: mean_distance(&p, &g, skel.upper_body()),
                mpjpe_full: mean_distance(&p, &g, &all),
            })
        })
        .collect()
}

/// Refines the first `count` test records three ways: latent space from the
/// region center, latent space from zero, and pose space from the decoded
/// region center. The zero-initialized run is anchored at zero.
pub fn refinement_traces(
    skel: &Skeleton,
    flow: &FlowModel,
    lra: &Lra,
    data: &Dataset,
    count: usize,
    objective: &RefineObjective,
    cfg: &LbfgsConfig,
) -> Result<Vec<TraceRow>> {
    let count = count.min(data.len());
    let subset = data.subset(&(0..count).collect::<Vec<_>>());
    let conds = subset.conditions();
    let regions = latent_regions(lra, &conds, Hands::Both)?;
    let d = flow.pose_dim();
    let zero = vec![0.0; d];
    let mut rows = Vec::new();
    for (i, (r, region)) in subset.records.iter().zip(&regions).enumerate() {
        let inst = Instance { skel, hmd: &r.hmd, beta: &r.beta };
        let c = &conds[i * COND_DIM..(i + 1) * COND_DIM];
        let latent_mu = refine_latent(flow, &inst, &region.mu, &region.mu, objective, cfg)?;
        rows.extend(trace_rows(skel, &latent_mu, &subset, i, "latent", "mu", &TRACE_ITERATIONS)?);
        let latent_zero = refine_latent(flow, &inst, &zero, &zero, objective, cfg)?;
        rows.extend(trace_rows(skel, &latent_zero, &subset, i, "latent", "zero", &TRACE_ITERATIONS)?);
        let x0 = flow.forward(&region.mu, c, 1)?;
        let pose = refine_pose(flow, &inst, &x0, objective, cfg)?;
        rows.extend(trace_rows(skel, &pose, &subset, i, "pose", "mu", &TRACE_ITERATIONS)?);
    }
    Ok(rows)
}

pub fn write_traces(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, write_csv(rows)?).map_err(|e| FlagError::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| FlagError::Format(format!("{}: {e}", path.display())))?;
    let rows: Vec<TraceRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| FlagError::Format(format!("{}: {e}", path.display())))?;
    if rows.iter().any(|t| !t.mpjpe_upper.is_finite() || !t.mpjpe_full.is_finite()) {
        return Err(FlagError::Format(format!("{}: non-finite trace value", path.display())));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub space: String,
    pub init_rule: String,
    pub iteration: usize,
    pub mpjpe_upper: f64,
    pub mpjpe_full: f64,
    pub count: usize,
}

/// Mean MPJPE per (space, init rule, iteration), in that order.
pub fn report(traces: &[TraceRow]) -> Result<Vec<ReportRow>> {
    if traces.is_empty() {
        return Err(FlagError::Invalid("report needs at least one trace".into()));
    }
    let mut groups: BTreeMap<(String, String, usize), (f64, f64, usize)> = BTreeMap::new();
    for t in traces {
        let e = groups.entry((t.space.clone(), t.init_rule.clone(), t.iteration)).or_default();
        e.0 += t.mpjpe_upper;
        e.1 += t.mpjpe_full;
        e.2 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|((space, init_rule, iteration), (u, f, n))| ReportRow {
            space,
            init_rule,
            iteration,
            mpjpe_upper: u / n as f64,
            mpjpe_full: f / n as f64,
            count: n,
        })
        .collect())
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    write_csv(rows)
}
