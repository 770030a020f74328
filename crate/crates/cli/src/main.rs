use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use stp_tensor::dense::{run_dense_simulation, write_dense_csv, DenseKind};
use stp_tensor::eval::{
    self, link_scores, node_factors, pca_project, sweep_r1_r2, write_sweep_csv,
};
use stp_tensor::io::{load_model, model_to_json, save_model};
use stp_tensor::sampler::{linspace, run_sparsity_simulation, write_simulation_csv, StpConfig};
use stp_tensor::synth::{generate, SynthConfig};
use stp_tensor::tensor::{
    load_index_list, load_tensor, sample_unobserved, save_tensor, split_train_test, write_atomic,
    SplitSpec,
};
use stp_tensor::train::{train, write_training_log};
use stp_tensor::{Error, TrainConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(
    name = "stp",
    version,
    about = "Sparse tensor factorization with hierarchical Gamma processes"
)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(untagged)]
enum Command {
    /// Sparsity curves of the sparse tensor process over a grid of alpha.
    Simulate(SimulateArgs),
    /// Present-fraction curves of the dense Bernoulli baselines.
    SimulateDense(SimulateDenseArgs),
    /// Fit a model to a tensor file.
    Train(TrainArgs),
    /// Predict entry values.
    Predict(QueryArgs),
    /// Score candidate links by their entry probability.
    ScoreLinks(QueryArgs),
    /// Value MSE/MAE and link AUC on a test tensor.
    Eval(EvalArgs),
    /// R1/R2 validation sweep at a fixed total number of factors.
    Sweep(SweepArgs),
    /// Per-mode factor tables, optionally with 2-D PCA coordinates.
    ExportFactors(ExportArgs),
    /// Draw a synthetic tensor from the full generative model.
    Synth(SynthArgs),
    /// Random train/test split of a tensor file.
    Split(SplitArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    r1: usize,
    /// Comma-separated list of R2 values.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    r2: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    alpha_min: f64,
    #[arg(long, default_value_t = 15.0)]
    alpha_max: f64,
    #[arg(long, default_value_t = 15)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    modes: usize,
    #[arg(long, default_value_t = 5000)]
    max_atoms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SimulateDenseArgs {
    /// cp or gp-rff
    #[arg(long, default_value = "cp")]
    kind: String,
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    modes: usize,
    #[arg(long, default_value_t = 3)]
    rank: usize,
    /// Random features for gp-rff.
    #[arg(long, default_value_t = 50)]
    m: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 2)]
    r1: usize,
    #[arg(long, default_value_t = 3)]
    r2: usize,
    #[arg(long, default_value_t = 50)]
    m: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    batch: usize,
    #[arg(long, default_value_t = 700)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training-log CSV (default: <out>.log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also dump every parameter as JSON to this path.
    #[arg(long)]
    export_json: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    /// Index tuples, one per line; a trailing value column is ignored.
    #[arg(long)]
    indices: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Extra observed entries (e.g. the training tensor) never used as negatives.
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Negatives per test entry for the AUC; 0 skips link evaluation.
    #[arg(long, default_value_t = 10)]
    neg_ratio: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 11)]
    r_total: usize,
    #[arg(long, default_value_t = 50)]
    m: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    batch: usize,
    #[arg(long, default_value_t = 700)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory receiving mode<k>.csv files.
    #[arg(long)]
    out_dir: PathBuf,
    /// Append 2-D PCA coordinates of [theta, omega_tilde].
    #[arg(long)]
    pca: bool,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 8.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    r1: usize,
    #[arg(long, default_value_t = 2)]
    r2: usize,
    #[arg(long, default_value_t = 2)]
    modes: usize,
    #[arg(long, default_value_t = 2000)]
    entries: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0.02)]
    gen_tau: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Written next to every output so the run can be reproduced.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    version: String,
    subcommand: String,
    /// Arguments after the program name, as given.
    argv: Vec<String>,
    /// Every flag after defaults were applied.
    flags: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) => 1,
            Error::NonFinite(_) | Error::Domain(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: msg.into(),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("stp: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(argv: Vec<String>) -> CliResult {
    let cli =
        match Cli::try_parse_from(std::iter::once("stp".to_string()).chain(argv.iter().cloned())) {
            Ok(c) => c,
            Err(e) => {
                let code = if e.use_stderr() { 1 } else { 0 };
                // help and version go to stdout, parse errors to stderr
                let _ = e.print();
                return if code == 0 { Ok(()) } else { Err(usage("")) };
            }
        };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        // fails only if a pool already exists, as on replay; keep the first cap
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let manifest = |seed: Option<u64>, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>| RunManifest {
        tool: "stp".into(),
        version: VERSION.into(),
        subcommand: subcommand_name(&cli.command).into(),
        argv: argv.clone(),
        flags: serde_json::to_value(&cli.command).unwrap_or(Value::Null),
        seed,
        inputs,
        outputs,
    };
    match &cli.command {
        Command::Simulate(a) => simulate(a, manifest(Some(a.seed), vec![], vec![a.out.clone()])),
        Command::SimulateDense(a) => {
            simulate_dense(a, manifest(Some(a.seed), vec![], vec![a.out.clone()]))
        }
        Command::Train(a) => {
            let log = a.log.clone().unwrap_or_else(|| sibling(&a.out, "log.csv"));
            let mut outs = vec![a.out.clone(), log.clone()];
            outs.extend(a.export_json.clone());
            run_train(a, &log, manifest(Some(a.seed), vec![a.data.clone()], outs))
        }
        Command::Predict(a) => predict(
            a,
            manifest(
                None,
                vec![a.model.clone(), a.indices.clone()],
                vec![a.out.clone()],
            ),
        ),
        Command::ScoreLinks(a) => score(
            a,
            manifest(
                None,
                vec![a.model.clone(), a.indices.clone()],
                vec![a.out.clone()],
            ),
        ),
        Command::Eval(a) => {
            let mut ins = vec![a.model.clone(), a.test.clone()];
            ins.extend(a.exclude.clone());
            run_eval(a, manifest(Some(a.seed), ins, vec![a.out.clone()]))
        }
        Command::Sweep(a) => sweep(
            a,
            manifest(Some(a.seed), vec![a.data.clone()], vec![a.out.clone()]),
        ),
        Command::ExportFactors(a) => export(
            a,
            manifest(None, vec![a.model.clone()], vec![a.out_dir.clone()]),
        ),
        Command::Synth(a) => synth(a, manifest(Some(a.seed), vec![], vec![a.out.clone()])),
        Command::Split(a) => split(
            a,
            manifest(
                Some(a.seed),
                vec![a.data.clone()],
                vec![a.train_out.clone(), a.test_out.clone()],
            ),
        ),
        Command::Replay(a) => replay(a),
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate(_) => "simulate",
        Command::SimulateDense(_) => "simulate-dense",
        Command::Train(_) => "train",
        Command::Predict(_) => "predict",
        Command::ScoreLinks(_) => "score-links",
        Command::Eval(_) => "eval",
        Command::Sweep(_) => "sweep",
        Command::ExportFactors(_) => "export-factors",
        Command::Synth(_) => "synth",
        Command::Split(_) => "split",
        Command::Replay(_) => "replay",
    }
}

/// `dir/name.ext` -> `dir/name.ext.<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn manifest_path(primary: &Path) -> PathBuf {
    sibling(primary, "manifest.json")
}

fn write_manifest(m: &RunManifest, primary: &Path) -> CliResult {
    let mut bytes = serde_json::to_vec_pretty(m).map_err(|e| usage(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(&manifest_path(primary), &bytes)?;
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(Error::from)?;
    Ok(buf)
}

fn simulate(a: &SimulateArgs, m: RunManifest) -> CliResult {
    if a.steps == 0 || a.alpha_min > a.alpha_max || a.alpha_min.is_nan() || a.alpha_min <= 0.0 {
        return Err(usage(
            "need --steps >= 1 and 0 < --alpha-min <= --alpha-max",
        ));
    }
    let base = StpConfig {
        r1: a.r1,
        num_modes: a.modes,
        max_atoms: a.max_atoms,
        seed: a.seed,
        ..Default::default()
    };
    let results = run_sparsity_simulation(
        &linspace(a.alpha_min, a.alpha_max, a.steps),
        &a.r2,
        a.reps,
        &base,
    )?;
    write_atomic(&a.out, &csv_bytes(|b| write_simulation_csv(&results, b))?)?;
    write_manifest(&m, &a.out)
}

fn simulate_dense(a: &SimulateDenseArgs, m: RunManifest) -> CliResult {
    let kind: DenseKind = a.kind.parse()?;
    let points = run_dense_simulation(kind, &a.sizes, a.modes, a.rank, a.m, a.reps, a.seed)?;
    write_atomic(&a.out, &csv_bytes(|b| write_dense_csv(&points, b))?)?;
    write_manifest(&m, &a.out)
}

fn run_train(a: &TrainArgs, log: &Path, m: RunManifest) -> CliResult {
    let data = load_tensor(&a.data)?;
    let cfg = TrainConfig {
        r1: a.r1,
        r2: a.r2,
        num_freqs: a.m,
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        alpha: a.alpha,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let manifest_value = serde_json::to_value(&m).map_err(|e| usage(e.to_string()))?;
    let out = match train(&data, &cfg) {
        Ok(out) => out,
        Err(failure) => {
            let snap = sibling(&a.out, "snapshot.bin");
            if failure.snapshot.params.num_modes() > 0 {
                save_model(&failure.snapshot, &manifest_value, &snap)?;
                eprintln!("stp: last finite parameters written to {}", snap.display());
            }
            return Err(
                Failure::from(failure.source).with_context(format!("epoch {}", failure.epoch))
            );
        }
    };
    save_model(&out.model, &manifest_value, &a.out)?;
    write_atomic(log, &csv_bytes(|b| write_training_log(&out.trace, b))?)?;
    if let Some(path) = &a.export_json {
        let json = serde_json::to_vec_pretty(&model_to_json(&out.model, &manifest_value))
            .map_err(|e| usage(e.to_string()))?;
        write_atomic(path, &json)?;
    }
    write_manifest(&m, &a.out)
}

impl Failure {
    fn with_context(mut self, ctx: String) -> Self {
        self.message = format!("{ctx}: {}", self.message);
        self
    }
}

fn write_index(buf: &mut Vec<u8>, idx: &[usize]) {
    for i in idx {
        buf.extend_from_slice(i.to_string().as_bytes());
        buf.push(b',');
    }
}

fn index_header(k: usize) -> String {
    (0..k).map(|i| format!("i{i},")).collect()
}

fn predict(a: &QueryArgs, m: RunManifest) -> CliResult {
    let (model, _) = load_model(&a.model)?;
    let k = model.params.num_modes();
    let indices = load_index_list(&a.indices, k)?;
    let mut buf = format!("{}mean,variance,unseen\n", index_header(k)).into_bytes();
    for idx in &indices {
        let (mean, var, unseen) = model.predict_value(idx)?;
        write_index(&mut buf, idx);
        buf.extend_from_slice(format!("{mean:?},{var:?},{}\n", u8::from(unseen)).as_bytes());
    }
    write_atomic(&a.out, &buf)?;
    write_manifest(&m, &a.out)
}

fn score(a: &QueryArgs, m: RunManifest) -> CliResult {
    let (model, _) = load_model(&a.model)?;
    let k = model.params.num_modes();
    let indices = load_index_list(&a.indices, k)?;
    let scores = link_scores(&model, &indices)?;
    let mut buf = format!("{}score,log_score,unseen\n", index_header(k)).into_bytes();
    for (idx, s) in indices.iter().zip(&scores) {
        write_index(&mut buf, idx);
        buf.extend_from_slice(
            format!("{:?},{:?},{}\n", s.value, s.value.ln(), u8::from(s.unseen)).as_bytes(),
        );
    }
    write_atomic(&a.out, &buf)?;
    write_manifest(&m, &a.out)
}

fn run_eval(a: &EvalArgs, m: RunManifest) -> CliResult {
    let (model, _) = load_model(&a.model)?;
    let test = load_tensor(&a.test)?;
    let negatives = if a.neg_ratio > 0 {
        let mut observed: HashSet<Vec<usize>> = test.distinct_indices().into_iter().collect();
        let mut dims = test.dims().to_vec();
        if let Some(path) = &a.exclude {
            let extra = load_tensor(path)?;
            if extra.num_modes() != dims.len() {
                return Err(Error::DimensionMismatch {
                    expected: dims.len(),
                    got: extra.num_modes(),
                }
                .into());
            }
            for (d, e) in dims.iter_mut().zip(extra.dims()) {
                *d = (*d).max(*e);
            }
            observed.extend(extra.distinct_indices());
        }
        Some(sample_unobserved(
            &dims,
            &observed,
            a.neg_ratio * test.len(),
            a.seed,
        )?)
    } else {
        None
    };
    let report = eval::evaluate(&model, &test, negatives.as_deref())?;
    if report.unseen_entries > 0 {
        eprintln!(
            "stp: {} test entries touch nodes unseen in training",
            report.unseen_entries
        );
    }
    write_atomic(&a.out, &csv_bytes(|b| report.write_csv(b))?)?;
    write_manifest(&m, &a.out)
}

fn sweep(a: &SweepArgs, m: RunManifest) -> CliResult {
    let data = load_tensor(&a.data)?;
    let template = TrainConfig {
        num_freqs: a.m,
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        alpha: a.alpha,
        seed: a.seed,
        ..Default::default()
    };
    let result = sweep_r1_r2(&data, a.r_total, &template, a.seed)?;
    eprintln!(
        "stp: best (r1, r2) = ({}, {})",
        result.best.0, result.best.1
    );
    write_atomic(&a.out, &csv_bytes(|b| write_sweep_csv(&result.rows, b))?)?;
    write_manifest(&m, &a.out)
}

fn export(a: &ExportArgs, m: RunManifest) -> CliResult {
    let (model, _) = load_model(&a.model)?;
    std::fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    let p = &model.params;
    for k in 0..p.num_modes() {
        let rows = node_factors(&model, k);
        let coords = if a.pca {
            // PCA over the GP input block of each node: theta and omega_tilde
            let inputs: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r[..p.r1].iter().chain(&r[p.r1 + p.r2..]).copied().collect())
                .collect();
            Some(pca_project(&inputs)?)
        } else {
            None
        };
        let mut header = String::from("node");
        header.extend((0..p.r1).map(|r| format!(",theta_{r}")));
        header.extend((0..p.r2).map(|r| format!(",omega_{r}")));
        header.extend((0..p.r2).map(|r| format!(",omega_tilde_{r}")));
        if coords.is_some() {
            header.push_str(",pc1,pc2");
        }
        header.push('\n');
        let mut buf = header.into_bytes();
        for (j, row) in rows.iter().enumerate() {
            buf.extend_from_slice(model.maps.original_ids[k][j].to_string().as_bytes());
            for v in row {
                buf.extend_from_slice(format!(",{v:?}").as_bytes());
            }
            if let Some(c) = &coords {
                buf.extend_from_slice(format!(",{:?},{:?}", c[j][0], c[j][1]).as_bytes());
            }
            buf.push(b'\n');
        }
        write_atomic(&a.out_dir.join(format!("mode{k}.csv")), &buf)?;
    }
    write_manifest(&m, &a.out_dir.join("factors"))
}

fn synth(a: &SynthArgs, m: RunManifest) -> CliResult {
    let cfg = SynthConfig {
        alpha: a.alpha,
        r1: a.r1,
        r2: a.r2,
        num_modes: a.modes,
        entries: a.entries,
        noise_var: a.noise,
        gen_tau: a.gen_tau,
        seed: a.seed,
        ..Default::default()
    };
    let data = generate(&cfg)?;
    save_tensor(&data.tensor, &a.out)?;
    write_manifest(&m, &a.out)
}

fn split(a: &SplitArgs, m: RunManifest) -> CliResult {
    let data = load_tensor(&a.data)?;
    let (tr, te) = split_train_test(
        &data,
        SplitSpec {
            train_fraction: a.train_fraction,
            seed: a.seed,
        },
    )?;
    save_tensor(&tr, &a.train_out)?;
    save_tensor(&te, &a.test_out)?;
    write_manifest(&m, &a.train_out)
}

fn replay(a: &ReplayArgs) -> CliResult {
    let text = std::fs::read_to_string(&a.manifest).map_err(Error::from)?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", a.manifest.display()),
    })?;
    if m.tool != "stp" {
        return Err(Failure {
            code: 2,
            message: format!("{} is not an stp manifest", a.manifest.display()),
        });
    }
    if m.version != VERSION {
        eprintln!(
            "stp: manifest written by version {}, replaying with {VERSION}",
            m.version
        );
    }
    if m.argv.iter().any(|s| s == "replay") {
        return Err(usage("a manifest cannot replay another replay"));
    }
    dispatch(m.argv)
}
