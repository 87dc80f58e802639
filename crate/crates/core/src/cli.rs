//! Command-line front end.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or input error,
//! 3 numeric failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::batchpipe::{path_grad_check, PathCheck};
use crate::dataio::{gvec_read, synth_generate, Dataset, SynthConfig};
use crate::diffgrad::{OpKind, DEFAULT_STEP, DEFAULT_TOL};
use crate::error::{GrocoError, Result};
use crate::evals::{self, EvalReport, Space, ToyConfig, DEFAULT_KNN_TAU};
use crate::losses::{GroCoParams, InfoNceParams, LossConfig, LossKind, Margin, TripletParams};
use crate::model::{checkpoint_load, checkpoint_save};
use crate::par::{self, Execution};
use crate::sortcore::{diff_sort, hard_sort};
use crate::train::{train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "groco",
    version,
    about = "Differentiable sorting networks and group ordering constraint losses"
)]
pub struct Cli {
    /// Worker threads for per-anchor and k-NN parallelism; 1 runs sequentially, 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sort values with the odd-even network and print the permutation matrix.
    Sort(SortArgs),
    /// Train encoder and projection head on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with weighted k-NN or a linear probe.
    Eval(EvalArgs),
    /// Run the five-variable toy optimisation and write its trajectory.
    Toy(ToyArgs),
    /// Check analytic gradients of the distance -> sort -> loss path.
    Gradcheck(GradcheckArgs),
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|e| format!("'{}': {e}", t.trim()))
        })
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

/// Comma-separated list argument.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

fn parse_f64_list(s: &str) -> std::result::Result<List<f64>, String> {
    parse_list(s).map(List)
}

fn parse_usize_list(s: &str) -> std::result::Result<List<usize>, String> {
    parse_list(s).map(List)
}

fn parse_init(s: &str) -> std::result::Result<[f64; 5], String> {
    let v: Vec<f64> = parse_list(s)?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 5 values, got {}", v.len()))
}

fn parse_fault(s: &str) -> std::result::Result<(OpKind, f64), String> {
    let (op, factor) = s.split_once(':').unwrap_or((s, "1.5"));
    let kind = op.parse::<OpKind>().map_err(|e| e.to_string())?;
    let factor = factor.parse::<f64>().map_err(|e| e.to_string())?;
    Ok((kind, factor))
}

#[derive(Debug, Args)]
pub struct SortArgs {
    /// Comma-separated values, e.g. 6,1,4,2.
    #[arg(long, value_parser = parse_f64_list, allow_hyphen_values = true)]
    pub values: List<f64>,
    /// Inverse temperature of the relaxed swap.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Print the exact 0/1 permutation instead of the relaxed one.
    #[arg(long)]
    pub hard: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// GVEC dataset file.
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Generate the synthetic clustered dataset instead of reading a file.
    #[arg(long)]
    pub synth: bool,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub per_cluster: usize,
    #[arg(long, default_value_t = 4.0)]
    pub center_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub instance_noise: f64,
    /// Seed of the synthetic data and of the train/test split.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Fraction held out for evaluation; 0 trains on everything.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

impl DataArgs {
    fn synth_config(&self, view_noise: f64) -> SynthConfig {
        SynthConfig {
            clusters: self.clusters,
            dim: self.dim,
            per_cluster: self.per_cluster,
            center_scale: self.center_scale,
            instance_noise: self.instance_noise,
            view_noise,
            seed: self.data_seed,
        }
    }

    fn load(&self, view_noise: f64) -> Result<Dataset> {
        match (&self.data, self.synth) {
            (Some(path), _) => gvec_read(path),
            (None, true) => synth_generate(&self.synth_config(view_noise)),
            (None, false) => Err(GrocoError::invalid(
                "no data source: pass --data <file.gvec> or --synth",
            )),
        }
    }

    /// `(train, test)`; with a zero test fraction both sides are the full set.
    fn split(&self, data: Dataset) -> Result<(Dataset, Dataset)> {
        if self.test_fraction == 0.0 {
            return Ok((data.clone(), data));
        }
        data.split(self.test_fraction, self.data_seed)
    }

    fn dump(&self) -> String {
        let source = match &self.data {
            Some(p) => format!("data={}\n", p.display()),
            None => format!(
                "synth=true\nclusters={}\ndim={}\nper_cluster={}\ncenter_scale={}\ninstance_noise={}\n",
                self.clusters, self.dim, self.per_cluster, self.center_scale, self.instance_noise
            ),
        };
        format!(
            "{source}data_seed={}\ntest_fraction={}\n",
            self.data_seed, self.test_fraction
        )
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Loss per anchor: groco, infonce or triplet.
    #[arg(long, default_value = "groco")]
    pub loss: LossKind,
    /// Inverse temperature of the sorting relaxation (reference setting).
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Strongest negatives kept per anchor (reference setting).
    #[arg(long, default_value_t = 10)]
    pub neg: usize,
    /// InfoNCE temperature.
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    /// Triplet margin, or "inf" for the unclipped variant.
    #[arg(long, default_value = "0.8")]
    pub margin: Margin,
    /// Block gradient into non-anchor projections (reference setting).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub stopgrad: bool,
    /// Hard-sort positives and negatives before the relaxed sort (reference setting).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub preorder: bool,
    /// Draw negatives uniformly instead of taking the strongest.
    #[arg(long)]
    pub random_negatives: bool,
    /// Restrict InfoNCE to the top-N negatives too.
    #[arg(long)]
    pub infonce_top_n: bool,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Images per batch.
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Augmented views per image.
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    /// Per-coordinate Gaussian noise of each view.
    #[arg(long, default_value_t = 0.5)]
    pub view_noise: f64,
    #[arg(long, default_value_t = 3.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1)]
    pub warmup_epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 128)]
    pub rep_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub proj_dim: usize,
    /// Seed of initialisation, views, shuffling and negative sampling.
    #[arg(long, env = "GROCO_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint output path.
    #[arg(long, default_value = "groco.ckpt")]
    pub out: PathBuf,
    /// Per-step metrics CSV path.
    #[arg(long, default_value = "metrics.csv")]
    pub metrics: PathBuf,
    /// Print the resolved configuration as key=value lines first.
    #[arg(long)]
    pub dump_config: bool,
}

impl TrainArgs {
    fn config(&self, exec: Execution) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            views: self.views,
            loss: LossConfig {
                kind: self.loss,
                groco: GroCoParams::new(self.beta, self.neg)?,
                infonce: InfoNceParams::new(self.tau)?,
                triplet: TripletParams::new(self.margin)?,
            },
            negatives: self.neg,
            stop_grad: self.stopgrad,
            preorder: self.preorder,
            random_negatives: self.random_negatives,
            infonce_top_n: self.infonce_top_n,
            lr: self.lr,
            momentum: self.momentum,
            warmup_epochs: self.warmup_epochs,
            view_noise: self.view_noise,
            hidden: self.hidden,
            rep_dim: self.rep_dim,
            proj_dim: self.proj_dim,
            seed: self.seed,
            exec,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    Knn,
    Linear,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "knn")]
    pub mode: EvalMode,
    /// Neighbour counts for k-NN.
    #[arg(long, value_parser = parse_usize_list, default_value = "1,10,20")]
    pub k: List<usize>,
    /// Vote temperature of weighted k-NN.
    #[arg(long, default_value_t = DEFAULT_KNN_TAU)]
    pub knn_tau: f64,
    /// Embedding to evaluate: representation or projection.
    #[arg(long, default_value = "representation")]
    pub space: Space,
    #[arg(long, default_value_t = 500)]
    pub probe_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub probe_lr: f64,
    /// Also write accuracies to this CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    /// groco or infonce.
    #[arg(long, default_value = "groco")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Inverse temperature for GroCo.
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    /// Temperature for InfoNCE.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Initial similarities: positive, then four negatives.
    #[arg(long, value_parser = parse_init, default_value = "0,0.6,0.3,0,-0.3", allow_hyphen_values = true)]
    pub init: [f64; 5],
    /// Trajectory CSV path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Largest positive-group size checked.
    #[arg(long, default_value_t = 4)]
    pub kmax: usize,
    /// Largest negative-group size checked.
    #[arg(long, default_value_t = 10)]
    pub nmax: usize,
    #[arg(long, value_parser = parse_f64_list, default_value = "0.5,1,2")]
    pub betas: List<f64>,
    /// Dimension of the random embedding vectors.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, env = "GROCO_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_STEP)]
    pub h: f64,
    /// Maximum relative error.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Scale one op's backward pass, e.g. arctan:1.5 (negative control).
    #[arg(long, hide = true, value_parser = parse_fault)]
    pub inject_fault: Option<(OpKind, f64)>,
}

/// Exit code for a library error.
pub fn exit_code(e: &GrocoError) -> i32 {
    match e {
        GrocoError::Numeric { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let exec = if cli.threads == 1 {
        Execution::Sequential
    } else {
        if cli.threads > 1 && !par::set_threads(cli.threads) {
            eprintln!("warning: thread pool already initialised; --threads ignored");
        }
        Execution::Parallel
    };
    let result = match &cli.command {
        Command::Sort(a) => cmd_sort(a),
        Command::Train(a) => cmd_train(a, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::Toy(a) => cmd_toy(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// At least six significant digits.
fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let decimals = (5 - v.abs().log10().floor() as i64).max(0) as usize;
    format!("{v:.decimals$}")
}

pub fn cmd_sort(a: &SortArgs) -> Result<i32> {
    if a.values.0.is_empty() {
        return Err(GrocoError::invalid("no values given"));
    }
    let mut out = String::new();
    if a.hard {
        let (sorted, perm) = hard_sort(&a.values.0)?;
        let words: Vec<String> = sorted.iter().map(|v| v.to_string()).collect();
        out += &format!("sorted: {}\n", words.join(" "));
        out += "permutation (rows: output positions, columns: inputs):\n";
        let m = perm.to_matrix();
        for r in 0..m.size() {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{}", *v as u8)).collect();
            out += &format!("{}\n", row.join(" "));
        }
    } else {
        let s = diff_sort(&a.values.0, a.beta)?;
        let words: Vec<String> = s.sorted.iter().map(|&v| sig6(v)).collect();
        out += &format!("sorted: {}\n", words.join(" "));
        out += "permutation (rows: output positions, columns: inputs):\n";
        let m = &s.permutation;
        for r in 0..m.size() {
            let row: Vec<String> = m.row(r).iter().map(|&v| sig6(v)).collect();
            out += &format!("{}\n", row.join(" "));
        }
    }
    print!("{out}");
    Ok(EXIT_OK)
}

pub fn cmd_train(a: &TrainArgs, exec: Execution) -> Result<i32> {
    let config = a.config(exec)?;
    if a.dump_config {
        print!("{}{}", a.data.dump(), config.dump());
    }
    let data = a.data.load(a.view_noise)?;
    let (train_set, _) = a.data.split(data)?;
    std::fs::write(&a.metrics, "epoch,step,loss,lr\n")
        .map_err(|e| GrocoError::io(&a.metrics, e))?;
    let outcome = train(&config, &train_set, Some(&a.metrics))?;
    checkpoint_save(&a.out, &outcome.params, Some(&outcome.optimizer))?;
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {} mean loss {l}", e + 1);
    }
    println!(
        "trained {} steps on {} vectors; checkpoint {}; metrics {}",
        outcome.step_losses.len(),
        train_set.count(),
        a.out.display(),
        a.metrics.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs, exec: Execution) -> Result<i32> {
    if a.dump_config {
        print!(
            "{}checkpoint={}\nmode={:?}\nk={:?}\nknn_tau={}\nspace={}\nprobe_steps={}\nprobe_lr={}\n",
            a.data.dump(),
            a.checkpoint.display(),
            a.mode,
            a.k.0,
            a.knn_tau,
            a.space,
            a.probe_steps,
            a.probe_lr
        );
    }
    let ckpt = checkpoint_load(&a.checkpoint)?;
    let data = a.data.load(0.0)?;
    let expected = ckpt.params.dims().input();
    if data.dim() != expected {
        return Err(GrocoError::invalid(format!(
            "checkpoint expects {expected}-dimensional inputs, data has dimension {}",
            data.dim()
        )));
    }
    if data.labels().is_none() {
        return Err(GrocoError::invalid("evaluation needs a labelled dataset"));
    }
    if a.data.test_fraction == 0.0 {
        return Err(GrocoError::invalid(
            "evaluation needs a held-out split (--test-fraction > 0)",
        ));
    }
    let (train_set, test_set) = a.data.split(data)?;
    let train_e = evals::embed(&ckpt.params, &train_set, a.space)?;
    let test_e = evals::embed(&ckpt.params, &test_set, a.space)?;
    let (tl, sl) = (train_set.labels().unwrap(), test_set.labels().unwrap());
    let mut report = EvalReport {
        space: a.space,
        seed: a.data.data_seed,
        knn: Vec::new(),
        linear_probe: None,
        config: format!(
            "checkpoint={} train={} test={}",
            a.checkpoint.display(),
            train_set.count(),
            test_set.count()
        ),
    };
    match a.mode {
        EvalMode::Knn => {
            let acc = evals::knn_accuracies(&train_e, tl, &test_e, sl, &a.k.0, a.knn_tau, exec)?;
            report.knn = a.k.0.iter().copied().zip(acc).collect();
        }
        EvalMode::Linear => {
            report.linear_probe = Some(evals::linear_probe(
                &train_e,
                tl,
                &test_e,
                sl,
                a.probe_steps,
                a.probe_lr,
            )?);
        }
    }
    print!("{report}");
    if let Some(path) = &a.csv {
        let mut csv = String::from("space,mode,k,accuracy\n");
        for (k, acc) in &report.knn {
            csv += &format!("{},knn,{k},{acc}\n", a.space);
        }
        if let Some(acc) = report.linear_probe {
            csv += &format!("{},linear,,{acc}\n", a.space);
        }
        let io = |e| GrocoError::io(path, e);
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(csv.as_bytes()))
            .map_err(io)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_toy(a: &ToyArgs) -> Result<i32> {
    let cfg = ToyConfig {
        init: a.init,
        steps: a.steps,
        lr: a.lr,
        beta: a.beta,
        tau: a.tau,
    };
    let t = evals::toy_dynamics(a.loss, &cfg)?;
    match &a.out {
        Some(path) => {
            t.write_csv(path)?;
            let f = t.farthest_negative();
            println!(
                "{} steps; farthest negative s_neg{f} moved {} ; positive {} -> {}",
                a.steps,
                t.displacement(f),
                t.first()[0],
                t.last()[0]
            );
        }
        None => print!("{}", t.to_csv()),
    }
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    if a.kmax == 0 || a.nmax == 0 || a.dim == 0 {
        return Err(GrocoError::invalid(
            "--kmax, --nmax and --dim must be positive",
        ));
    }
    let mut failures = 0;
    let mut cases = 0;
    let mut worst: Option<(f64, String)> = None;
    for &beta in &a.betas.0 {
        for k in 1..=a.kmax {
            for n in 1..=a.nmax {
                let r = path_grad_check(&PathCheck {
                    positives: k,
                    negatives: n,
                    beta,
                    dim: a.dim,
                    seed: a.seed,
                    h: a.h,
                    tol: a.tol,
                    fault: a.inject_fault,
                })?;
                cases += 1;
                let w = r.worst;
                let desc = format!(
                    "K={k} N={n} beta={beta}: max relative error {:.3e} at coordinate {w} (analytic {:e}, numeric {:e})",
                    r.max_error, r.analytic[w], r.numeric[w]
                );
                if !r.passed {
                    failures += 1;
                    println!("FAIL {desc}");
                }
                if worst.as_ref().map_or(true, |(e, _)| r.max_error > *e) {
                    worst = Some((r.max_error, desc));
                }
            }
        }
    }
    let (_, desc) = worst.unwrap_or_default();
    println!("worst case {desc}");
    if failures > 0 {
        println!(
            "gradcheck FAILED: {failures} of {cases} cases above tolerance {:e}",
            a.tol
        );
        Ok(EXIT_CHECK_FAILED)
    } else {
        println!(
            "gradcheck passed: {cases} cases within tolerance {:e}",
            a.tol
        );
        Ok(EXIT_OK)
    }
}
