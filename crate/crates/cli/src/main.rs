mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use wpo_core::forecaster::{per_node_mse, train_stl, write_node_losses};
use wpo_core::grid::Network;
use wpo_core::numerics::rng::derive_seed;
use wpo_core::numerics::{Rng, WeightVector};
use wpo_core::scenarios::{fmt_f64, generate_scenarios, ScenarioDataset};
use wpo_core::surrogate::{read_samples_csv, train_surrogate, write_samples_csv, SurrogateModel};
use wpo_core::wpo::{
    build_surrogate_dataset, evaluate_weights, optimize_weights_multistart, run_wpo,
    write_trajectory_csv, write_weights_csv, PdplContext, WpoReport,
};

use crate::config::{sha256_hex, ExperimentConfig, Loaded};

#[derive(Parser)]
#[command(
    name = "wpo",
    version,
    about = "Weighted predict-and-optimize experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scenario dataset.
    GenData(Common),
    /// Train one forecaster at fixed weights (uniform unless --weights).
    Train {
        #[command(flatten)]
        common: Common,
        /// Weight table; the first row is used.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Sample weight settings, train them jointly and score each by PDPL.
    BuildSurrogateSet(Common),
    /// Fit the surrogate to a weight/PDPL table.
    TrainSurrogate {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/surrogate_set.csv.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Descend on a trained surrogate.
    OptimizeWeights {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/surrogate.json.
        #[arg(long)]
        surrogate: Option<PathBuf>,
    },
    /// Full pipeline with retrained verification.
    RunWpo(Common),
    /// PDPL of every configured baseline and WPO over the compare seeds.
    Compare(Common),
    /// Write the configured network as JSON and CSV tables.
    ExportNetwork(Common),
}

/// Resolved command context.
struct Run {
    cfg: ExperimentConfig,
    hash: String,
    seed: u64,
    out: PathBuf,
    jobs: usize,
    net: Network,
    margin_net: Network,
    command: &'static str,
    written: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_sha256: &'a str,
    files: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    seed: u64,
    config_sha256: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

impl Run {
    fn new(common: &Common, command: &'static str) -> Result<Run> {
        if common.jobs < 1 {
            bail!("--jobs must be at least 1");
        }
        let Loaded { cfg, hash, base } = config::load(&common.config)?;
        let (net, margin_net) = cfg.networks(&base)?;
        let seed = common.seed.unwrap_or(cfg.seed);
        let out = common.out.clone().unwrap_or_else(|| base.join(&cfg.out));
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run {
            cfg,
            hash,
            seed,
            out,
            jobs: common.jobs,
            net,
            margin_net,
            command,
            written: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self, seed: u64) -> Result<ScenarioDataset> {
        let ds = generate_scenarios(
            &self.net,
            &self.cfg.generator(),
            &mut Rng::new(derive_seed(seed, 100)),
        )
        .map_err(|e| e.in_stage("dataset"))?;
        Ok(ds)
    }

    /// Prefixes a CSV with a `#` provenance line.
    fn stamp_csv(&mut self, path: PathBuf) -> Result<()> {
        let body = std::fs::read(&path)?;
        let mut bytes = format!("# seed={} config_sha256={}\n", self.seed, self.hash).into_bytes();
        bytes.extend(body);
        std::fs::write(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<()> {
        let path = self.path(name);
        let doc = Stamped {
            seed: self.seed,
            config_sha256: &self.hash,
            body,
        };
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
        self.written.push(path);
        Ok(())
    }

    fn record(&mut self, path: PathBuf) {
        self.written.push(path);
    }

    fn finish(self) -> Result<()> {
        let mut files = Vec::new();
        for p in &self.written {
            let bytes = std::fs::read(p)?;
            let name = p.strip_prefix(&self.out).unwrap_or(p).display().to_string();
            files.push(ManifestEntry {
                path: name,
                sha256: sha256_hex(&bytes),
            });
        }
        let m = Manifest {
            command: self.command,
            seed: self.seed,
            config_sha256: &self.hash,
            files,
        };
        std::fs::write(
            self.out.join(format!("manifest-{}.json", self.command)),
            serde_json::to_string_pretty(&m)? + "\n",
        )?;
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(Run::new(&c, "gen-data")?),
        Command::Train { common, weights } => train(Run::new(&common, "train")?, weights),
        Command::BuildSurrogateSet(c) => build_set(Run::new(&c, "build-surrogate-set")?),
        Command::TrainSurrogate { common, samples } => {
            fit_surrogate(Run::new(&common, "train-surrogate")?, samples)
        }
        Command::OptimizeWeights { common, surrogate } => {
            optimize(Run::new(&common, "optimize-weights")?, surrogate)
        }
        Command::RunWpo(c) => wpo(Run::new(&c, "run-wpo")?),
        Command::Compare(c) => compare(Run::new(&c, "compare")?, c.seed),
        Command::ExportNetwork(c) => export_network(Run::new(&c, "export-network")?),
    }
}

fn gen_data(mut run: Run) -> Result<()> {
    let ds = run.dataset(run.seed)?;
    ds.save(&run.out, "dataset")?;
    run.stamp_csv(run.path("dataset.csv"))?;
    run.record(run.path("dataset.json"));
    println!(
        "dataset: {} rows x {} nodes (train {:?}, eval {:?})",
        ds.len(),
        ds.node_ids.len(),
        ds.train,
        ds.eval
    );
    for (j, id) in ds.node_ids.iter().enumerate() {
        let col: Vec<f64> = ds.values.iter().map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let max = col.iter().cloned().fold(f64::MIN, f64::max);
        println!("  node {id:>3}: mean {mean:.6} max {max:.6} p.u.");
    }
    run.finish()
}

fn read_first_weights(path: &Path, net: &Network) -> Result<WeightVector> {
    let (ids, rows) =
        read_samples_csv(path).with_context(|| format!("reading weights {}", path.display()))?;
    if ids != net.ul_nodes {
        bail!(
            "weights {} are for nodes {ids:?}, network has {:?}",
            path.display(),
            net.ul_nodes
        );
    }
    rows.into_iter()
        .next()
        .map(|s| s.w)
        .with_context(|| format!("{} has no rows", path.display()))
}

fn train(mut run: Run, weights: Option<PathBuf>) -> Result<()> {
    let net = run.net.clone();
    let ds = run.dataset(run.seed)?;
    let w = match weights {
        Some(p) => read_first_weights(&p, &net)?,
        None => WeightVector::uniform(net.n_ul()),
    };
    let wcfg = run.cfg.wpo_config(run.seed, run.jobs);
    let (model, report) = train_stl(&net, &ds, &w, &wcfg.stl).map_err(|e| e.in_stage("train"))?;
    model.save(&run.path("model.json"))?;
    run.record(run.path("model.json"));
    let ctx = PdplContext::new(&net, &ds, wcfg.report_eval_samples)
        .map_err(|e| e.in_stage("evaluate"))?;
    let pred = model.predict(&ctx.batch.features)?;
    let losses = per_node_mse(&pred, &ctx.batch.targets)?;
    write_node_losses(&run.path("node_losses.csv"), &net.ul_nodes, &losses)?;
    run.stamp_csv(run.path("node_losses.csv"))?;
    let pdpl = ctx
        .score(&pred, &model.norm)
        .map_err(|e| e.in_stage("evaluate"))?
        .pdpl;
    write_weights_csv(
        &run.path("weights.csv"),
        &net.ul_nodes,
        &[("trained".into(), w, pdpl)],
    )?;
    run.stamp_csv(run.path("weights.csv"))?;
    let mut loss_csv = String::from("epoch,loss\n");
    for (i, l) in report.epoch_loss.iter().enumerate() {
        loss_csv += &format!("{},{}\n", i + 1, fmt_f64(*l));
    }
    std::fs::write(run.path("train_loss.csv"), loss_csv)?;
    run.stamp_csv(run.path("train_loss.csv"))?;
    println!("pdpl {} mse {}", fmt_f64(pdpl), fmt_f64(ctx.mse(&pred)?));
    run.finish()
}

fn build_set(mut run: Run) -> Result<()> {
    let ds = run.dataset(run.seed)?;
    let cfg = run.cfg.wpo_config(run.seed, run.jobs);
    let samples = build_surrogate_dataset(&run.net, &ds, &cfg, &mut Rng::new(run.seed).fork(11))
        .map_err(|e| e.in_stage("dataset"))?;
    write_samples_csv(&run.path("surrogate_set.csv"), &run.net.ul_nodes, &samples)?;
    run.stamp_csv(run.path("surrogate_set.csv"))?;
    println!("{} weight settings scored", samples.len());
    run.finish()
}

fn fit_surrogate(mut run: Run, samples: Option<PathBuf>) -> Result<()> {
    let path = samples.unwrap_or_else(|| run.path("surrogate_set.csv"));
    let (ids, samples) =
        read_samples_csv(&path).with_context(|| format!("reading {}", path.display()))?;
    if ids != run.net.ul_nodes {
        bail!(
            "{} is for nodes {ids:?}, network has {:?}",
            path.display(),
            run.net.ul_nodes
        );
    }
    let cfg = run.cfg.wpo_config(run.seed, run.jobs);
    let fit =
        train_surrogate(&run.net, &samples, &cfg.surrogate).map_err(|e| e.in_stage("surrogate"))?;
    fit.model.save(&run.path("surrogate.json"))?;
    run.record(run.path("surrogate.json"));
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in fit.epoch_loss.iter().enumerate() {
        csv += &format!("{},{}\n", i + 1, fmt_f64(*l));
    }
    std::fs::write(run.path("surrogate_loss.csv"), csv)?;
    run.stamp_csv(run.path("surrogate_loss.csv"))?;
    let metrics = format!(
        "metric,value\ntrain_mse,{}\ntest_mse,{}\nn_train,{}\nn_test,{}\n",
        fmt_f64(fit.train_mse),
        fmt_f64(fit.test_mse),
        fit.train_idx.len(),
        fit.test_idx.len()
    );
    std::fs::write(run.path("surrogate_metrics.csv"), metrics)?;
    run.stamp_csv(run.path("surrogate_metrics.csv"))?;
    println!(
        "surrogate train mse {} test mse {} (normalized)",
        fmt_f64(fit.train_mse),
        fmt_f64(fit.test_mse)
    );
    run.finish()
}

fn optimize(mut run: Run, surrogate: Option<PathBuf>) -> Result<()> {
    let path = surrogate.unwrap_or_else(|| run.path("surrogate.json"));
    let model =
        SurrogateModel::load(&path).with_context(|| format!("reading {}", path.display()))?;
    if model.n_ul() != run.net.n_ul() {
        bail!(
            "surrogate has {} inputs, network has {} uncertain loads",
            model.n_ul(),
            run.net.n_ul()
        );
    }
    let cfg = run.cfg.wpo_config(run.seed, run.jobs);
    let (d, start) = optimize_weights_multistart(
        &model,
        run.net.n_ul(),
        &cfg.descent,
        cfg.dirichlet_alpha,
        &mut Rng::new(run.seed).fork(12),
        run.jobs,
    )
    .map_err(|e| e.in_stage("descent"))?;
    write_trajectory_csv(&run.path("trajectory.csv"), &run.net.ul_nodes, &d)?;
    run.stamp_csv(run.path("trajectory.csv"))?;
    let phi = model.scale.denormalize(d.phi_star);
    write_weights_csv(
        &run.path("weights.csv"),
        &run.net.ul_nodes,
        &[("wpo".into(), d.w_star.clone(), phi)],
    )?;
    run.stamp_csv(run.path("weights.csv"))?;
    println!(
        "start {start}: {} accepted steps, predicted pdpl {}",
        d.trajectory.len(),
        fmt_f64(phi)
    );
    run.finish()
}

fn wpo(mut run: Run) -> Result<()> {
    let ds = run.dataset(run.seed)?;
    let cfg = run.cfg.wpo_config(run.seed, run.jobs);
    let report = run_wpo(&run.net, &ds, &cfg)?;
    write_wpo_outputs(&mut run, &report)?;
    println!(
        "pdpl: wpo {} uniform {} ({} accepted steps)",
        fmt_f64(report.pdpl_star),
        fmt_f64(report.pdpl_uniform),
        report.descent.trajectory.len()
    );
    run.finish()
}

fn write_wpo_outputs(run: &mut Run, report: &WpoReport) -> Result<()> {
    run.write_json("report.json", report)?;
    write_trajectory_csv(
        &run.path("trajectory.csv"),
        &run.net.ul_nodes,
        &report.descent,
    )?;
    run.stamp_csv(run.path("trajectory.csv"))?;
    let rows: Vec<_> = report
        .comparison
        .iter()
        .map(|r| (r.method.clone(), r.w.clone(), r.pdpl))
        .collect();
    write_weights_csv(&run.path("weights.csv"), &run.net.ul_nodes, &rows)?;
    run.stamp_csv(run.path("weights.csv"))
}

struct Row {
    method: String,
    seed: u64,
    pdpl: f64,
    mse: f64,
    w: WeightVector,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn compare(mut run: Run, seed_override: Option<u64>) -> Result<()> {
    let seeds = match seed_override {
        Some(s) => vec![s],
        None => run.cfg.compare_seeds.clone(),
    };
    let mut methods: Vec<String> = run
        .cfg
        .baselines
        .iter()
        .map(|b| b.name().to_string())
        .collect();
    methods.push("wpo".into());
    let mut rows = Vec::new();
    for &seed in &seeds {
        let ds = run.dataset(seed)?;
        let cfg = run.cfg.wpo_config(seed, run.jobs);
        let ctx = PdplContext::new(&run.net, &ds, cfg.report_eval_samples)
            .map_err(|e| e.in_stage("evaluate"))?;
        for b in &run.cfg.baselines {
            let w = b
                .weights(&run.net, &run.margin_net, &ds, &cfg, derive_seed(seed, 300))
                .map_err(|e| e.in_stage("baseline"))?;
            let (pdpl, mse) = evaluate_weights(&run.net, &ds, &w, &cfg.stl, &ctx, cfg.retrains)
                .map_err(|e| e.in_stage("retrain"))?;
            rows.push(Row {
                method: b.name().into(),
                seed,
                pdpl,
                mse,
                w,
            });
        }
        let report = run_wpo(&run.net, &ds, &cfg)?;
        rows.push(Row {
            method: "wpo".into(),
            seed,
            pdpl: report.pdpl_star,
            mse: report.mse_star,
            w: report.w_star,
        });
        eprintln!("seed {seed} done");
    }
    let mut csv = String::from("method,seed,pdpl,mse\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{}\n",
            r.method,
            r.seed,
            fmt_f64(r.pdpl),
            fmt_f64(r.mse)
        );
    }
    for m in &methods {
        let mut p: Vec<f64> = rows
            .iter()
            .filter(|r| &r.method == m)
            .map(|r| r.pdpl)
            .collect();
        let mut q: Vec<f64> = rows
            .iter()
            .filter(|r| &r.method == m)
            .map(|r| r.mse)
            .collect();
        let (mp, mq) = (median(&mut p), median(&mut q));
        csv += &format!("{m},median,{},{}\n", fmt_f64(mp), fmt_f64(mq));
        println!("{m:>10}: median pdpl {} mse {}", fmt_f64(mp), fmt_f64(mq));
    }
    std::fs::write(run.path("comparison.csv"), csv)?;
    run.stamp_csv(run.path("comparison.csv"))?;
    let table: Vec<_> = rows
        .iter()
        .map(|r| (format!("{}@{}", r.method, r.seed), r.w.clone(), r.pdpl))
        .collect();
    write_weights_csv(&run.path("weights.csv"), &run.net.ul_nodes, &table)?;
    run.stamp_csv(run.path("weights.csv"))?;
    run.finish()
}

fn export_network(mut run: Run) -> Result<()> {
    let net = run.net.clone();
    std::fs::write(run.path("network.json"), net.to_json()? + "\n")?;
    run.record(run.path("network.json"));
    let mut buses = String::from("id,p_load,q_load,uncertain,dg_p_max\n");
    for b in &net.buses {
        let dg = net
            .dg_nodes
            .iter()
            .find(|d| d.id == b.id)
            .map(|d| fmt_f64(d.p_max))
            .unwrap_or_default();
        let ul = u8::from(net.ul_nodes.contains(&b.id));
        buses += &format!(
            "{},{},{},{ul},{dg}\n",
            b.id,
            fmt_f64(b.p_load),
            fmt_f64(b.q_load)
        );
    }
    std::fs::write(run.path("buses.csv"), buses)?;
    run.stamp_csv(run.path("buses.csv"))?;
    let mut branches = String::from("from,to,r,x,i_max\n");
    for br in &net.branches {
        branches += &format!(
            "{},{},{},{},{}\n",
            br.from,
            br.to,
            fmt_f64(br.r),
            fmt_f64(br.x),
            fmt_f64(br.i_max)
        );
    }
    std::fs::write(run.path("branches.csv"), branches)?;
    run.stamp_csv(run.path("branches.csv"))?;
    println!(
        "{} buses, {} branches, {} uncertain loads",
        net.n_buses(),
        net.branches.len(),
        net.n_ul()
    );
    run.finish()
}
