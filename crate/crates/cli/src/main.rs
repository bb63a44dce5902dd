use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use flag_core::checkpoint::{Checkpoint, Model};
use flag_core::datagen::{generate_dataset, Dataset, DatasetRecord, MotionPrior};
use flag_core::eval::{
    build_ood_sets, decode, evaluate, hide_hands, latent_regions, ood_eval, oracle_distance, read_traces, refinement_traces, report,
    report_csv, summarize, write_csv, write_traces, Hands, LatentRule, MetricsReport, Models, SinkhornConfig,
};
use flag_core::flow::FlowModel;
use flag_core::kinematics::{Pose, Skeleton};
use flag_core::lra::Lra;
use flag_core::refine::{LbfgsConfig, RefineObjective};
use flag_core::training::{finetune_hand_dropout, train_flow, train_lra, train_mlp_baseline, MlpBaseline, TrainConfig};
use flag_core::{ErrorClass, FlagError, Result};

/// Conditional flow pose prior: data generation, training, evaluation.
#[derive(Parser)]
#[command(name = "flag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Training configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file (a directory for datagen output).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Model checkpoints; their kind is read from the manifest.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.jsonl and test.jsonl into --out.
    Datagen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20_000)]
        train_size: usize,
        #[arg(long, default_value_t = 2_000)]
        test_size: usize,
    },
    /// Train the conditional flow on --data.
    TrainFlow {
        #[command(flatten)]
        common: Common,
    },
    /// Train the region approximator against a flow checkpoint.
    TrainLra {
        #[command(flatten)]
        common: Common,
    },
    /// Train the perceptron baseline against a flow checkpoint.
    TrainMlp {
        #[command(flatten)]
        common: Common,
    },
    /// Continue approximator training with random hand dropout.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Decode region centers for every condition of --data into a pose file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "both")]
        hands: String,
    },
    /// Pose errors of one latent rule on --data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// mu, zero, mlp or sample-K
        #[arg(long, default_value = "mu")]
        mode: String,
        #[arg(long, default_value = "both")]
        hands: String,
    },
    /// Likelihoods of ground truth, manipulated and noise poses.
    Ood {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        joints: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_scale: f64,
    },
    /// Distances of random, zero and predicted latents to the oracle latents.
    OracleDist {
        #[command(flatten)]
        common: Common,
    },
    /// Refinement traces for the first --count test records.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Mean MPJPE per iteration over trace files.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
}

struct Loaded {
    flow: Option<(FlowModel, String)>,
    lra: Option<Lra>,
    mlp: Option<MlpBaseline>,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| FlagError::Config(format!("{}: {e}", p.display())))?;
                TrainConfig::from_toml_str(&text)?
            }
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn data_path(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| FlagError::Invalid("--data is required".into()))
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| FlagError::Invalid("--out is required".into()))
    }

    fn dataset(&self, skel: &Skeleton) -> Result<Dataset> {
        Dataset::read(self.data_path()?, skel)
    }

    fn rng(&self, cfg: &TrainConfig) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(cfg.seed)
    }

    fn load(&self, skel: &Skeleton) -> Result<Loaded> {
        let mut cks = Vec::new();
        for p in &self.checkpoint {
            cks.push(Checkpoint::load(p, skel)?);
        }
        let mut flows = cks.iter().filter(|c| matches!(c.model, Model::Flow(_)));
        let flow = match (flows.next(), flows.next()) {
            (Some(_), Some(_)) => return Err(FlagError::Invalid("more than one flow checkpoint given".into())),
            (Some(c), None) => Some((c.clone().into_flow()?, c.hash())),
            _ => None,
        };
        let mut out = Loaded { flow, lra: None, mlp: None };
        for c in cks {
            let kind = c.model.kind();
            let flow_hash = match (&out.flow, kind) {
                (_, "flow") => continue,
                (Some((_, h)), _) => h.clone(),
                (None, _) => return Err(FlagError::Invalid(format!("a {kind} checkpoint needs its flow checkpoint"))),
            };
            let slot_taken = match kind {
                "lra" => out.lra.replace(c.into_lra(&flow_hash)?).is_some(),
                _ => out.mlp.replace(c.into_mlp(&flow_hash)?).is_some(),
            };
            if slot_taken {
                return Err(FlagError::Invalid(format!("more than one {kind} checkpoint given")));
            }
        }
        Ok(out)
    }
}

impl Loaded {
    fn flow(&self) -> Result<(&FlowModel, &str)> {
        self.flow.as_ref().map(|(f, h)| (f, h.as_str())).ok_or_else(|| FlagError::Invalid("a flow --checkpoint is required".into()))
    }

    fn lra(&self) -> Result<&Lra> {
        self.lra.as_ref().ok_or_else(|| FlagError::Invalid("an approximator --checkpoint is required".into()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FlagError::Io { path: dir.into(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| FlagError::Io { path: path.into(), source: e })
}

fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FlagError::Io { path: dir.into(), source: e })?;
    }
    ck.save(path)
}

/// Training history beside a checkpoint: `<out>.history.csv`.
fn write_history<T: Serialize>(out: &Path, rows: &[T]) -> Result<()> {
    let mut name = out.as_os_str().to_owned();
    name.push(".history.csv");
    write_text(Path::new(&name), &write_csv(rows)?)
}

#[derive(Serialize)]
struct MlpEpoch {
    epoch: usize,
    loss: f64,
}

fn run(cli: Cli) -> Result<()> {
    let skel = Skeleton::standard();
    match cli.command {
        Command::Datagen { common, train_size, test_size } => {
            let cfg = common.config()?;
            let out = common.out()?;
            let prior = MotionPrior::standard(&skel);
            let (train, test) = generate_dataset(&skel, &prior, train_size, test_size, cfg.seed)?;
            std::fs::create_dir_all(out).map_err(|e| FlagError::Io { path: out.into(), source: e })?;
            train.write(&out.join("train.jsonl"))?;
            test.write(&out.join("test.jsonl"))
        }
        Command::TrainFlow { common } => {
            let cfg = common.config()?;
            let data = common.dataset(&skel)?;
            let run = train_flow(&cfg, &data, &mut |e| eprintln!("flow epoch {} loss {:.4}", e.epoch, e.train_loss))?;
            save(&Checkpoint::new(Model::Flow(run.model), &skel, None), common.out()?)?;
            write_history(common.out()?, &run.history)
        }
        Command::TrainLra { common } => {
            let cfg = common.config()?;
            let data = common.dataset(&skel)?;
            let loaded = common.load(&skel)?;
            let (flow, hash) = loaded.flow()?;
            let run = train_lra(&cfg, &skel, &data, flow, &mut |e| eprintln!("region epoch {} loss {:.4}", e.epoch, e.loss))?;
            save(&Checkpoint::new(Model::Lra(run.model), &skel, Some(hash.into())), common.out()?)?;
            write_history(common.out()?, &run.history)
        }
        Command::TrainMlp { common } => {
            let cfg = common.config()?;
            let data = common.dataset(&skel)?;
            let loaded = common.load(&skel)?;
            let (flow, hash) = loaded.flow()?;
            let run = train_mlp_baseline(&cfg, &skel, &data, flow, &mut |e, l| eprintln!("baseline epoch {e} loss {l:.4}"))?;
            save(&Checkpoint::new(Model::Mlp(run.model), &skel, Some(hash.into())), common.out()?)?;
            let rows: Vec<MlpEpoch> = run.history.iter().enumerate().map(|(epoch, &loss)| MlpEpoch { epoch, loss }).collect();
            write_history(common.out()?, &rows)
        }
        Command::Finetune { common } => {
            let cfg = common.config()?;
            let data = common.dataset(&skel)?;
            let loaded = common.load(&skel)?;
            let (flow, hash) = loaded.flow()?;
            let run = finetune_hand_dropout(&cfg, &skel, &data, flow, loaded.lra()?, cfg.hand_dropout, cfg.finetune_epochs, &mut |e| {
                eprintln!("finetune epoch {} loss {:.4}", e.epoch, e.loss)
            })?;
            save(&Checkpoint::new(Model::Lra(run.model), &skel, Some(hash.into())), common.out()?)?;
            write_history(common.out()?, &run.history)
        }
        Command::Generate { common, hands } => {
            let hands: Hands = hands.parse()?;
            let data = common.dataset(&skel)?;
            let loaded = common.load(&skel)?;
            let (flow, _) = loaded.flow()?;
            let conds = hide_hands(flow, &data.conditions(), hands);
            let mu: Vec<f64> = latent_regions(loaded.lra()?, &conds, hands)?.into_iter().flat_map(|r| r.mu).collect();
            let poses = decode(flow, &mu, &conds)?;
            let d = skel.pose_dim();
            let records = data
                .records
                .iter()
                .enumerate()
                .map(|(i, r)| DatasetRecord::new(&skel, Pose::from_flat(&poses[i * d..(i + 1) * d])?, r.beta))
                .collect::<Result<Vec<_>>>()?;
            Dataset::new(&skel, records, data.ranges.clone()).write(common.out()?)
        }
        Command::Evaluate { common, mode, hands } => {
            let rule: LatentRule = mode.parse()?;
            let hands: Hands = hands.parse()?;
            let cfg = common.config()?;
            let data = common.dataset(&skel)?;
            let loaded = common.load(&skel)?;
            let (flow, _) = loaded.flow()?;
            let models = Models { flow, lra: loaded.lra.as_ref(), mlp: loaded.mlp.as_ref() };
            let ev = evaluate(&skel, models, &data, rule, hands, &mut common.rng(&cfg))?;
            let mut rep = MetricsReport::new(cfg.seed, cfg.hash());
            let subset = rule.name();
            for (metric, values) in [("mpjpe_upper", &ev.errors.upper), ("mpjpe_full", &ev.errors.full)] {
                let s = summarize(values);
                rep.push(metric, &subset, s.mean, s.count)?;
                rep.push(&format!("{metric}_se"), &subset, s.se, s.count)?;
            }
            if let Some(std) = &ev.joint_std {
                for (j, v) in std.iter().enumerate() {
                    rep.push("joint_std", skel.joint_name(j), *v, data.len())?;
                }
            }
            rep.write(common.out()?)
        }
        Command::Ood { common, joints, noise_scale } => {
            let cfg = common.config()?;
            let data = common.dataset(&skel)?;
            let loaded = common.load(&skel)?;
            let (flow, _) = loaded.flow()?;
            let sets = build_ood_sets(&skel, &data, data.ranges.as_ref(), joints, noise_scale, &mut common.rng(&cfg))?;
            let r = ood_eval(flow, &data, &sets)?;
            let mut rep = MetricsReport::new(cfg.seed, cfg.hash());
            let n = data.len();
            rep.push("nll", "gt", r.nll_gt, n)?;
            rep.push("nll", "manipulated", r.nll_manipulated, n)?;
            rep.push("nll", "noise", r.nll_noise, n)?;
            rep.push("rd", "manipulated", r.rd_manipulated, n)?;
            rep.push("rd", "noise", r.rd_noise, n)?;
            rep.write(common.out()?)
        }
        Command::OracleDist { common } => {
            let cfg = common.config()?;
            let data = common.dataset(&skel)?;
            let loaded = common.load(&skel)?;
            let (flow, _) = loaded.flow()?;
            let r = oracle_distance(flow, loaded.lra()?, &data, &SinkhornConfig::default(), &mut common.rng(&cfg))?;
            let mut rep = MetricsReport::new(cfg.seed, cfg.hash());
            for (name, (cos, zero, ot)) in [("random", r.random), ("zeros", r.zeros), ("mu", r.mu)] {
                rep.push("cosine", name, cos, r.count)?;
                rep.push("cosine_zero_norm", name, zero as f64, r.count)?;
                rep.push("sinkhorn", name, ot, r.count)?;
            }
            rep.write(common.out()?)
        }
        Command::Refine { common, count } => {
            let data = common.dataset(&skel)?;
            let loaded = common.load(&skel)?;
            let (flow, _) = loaded.flow()?;
            let rows = refinement_traces(
                &skel,
                flow,
                loaded.lra()?,
                &data,
                count,
                &RefineObjective::default(),
                &LbfgsConfig::default(),
            )?;
            write_traces(common.out()?, &rows)
        }
        Command::Report { common, traces } => {
            let mut rows = Vec::new();
            for t in &traces {
                rows.extend(read_traces(t)?);
            }
            write_text(common.out()?, &report_csv(&report(&rows)?)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}
