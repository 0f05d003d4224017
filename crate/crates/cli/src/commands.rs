//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use psilon::data::Dataset;
use psilon::pathnorm::{analyze as analyze_network, AnalyzeOptions};
use psilon::training::{
    evaluate, grid_search, write_metrics_csv, EvalReport, PruneWindow, TrainResult, DEFAULT_LAMBDAS,
};
use psilon::{
    init_network, network_sparsity, seeded_rng, train as train_network, Network, PathNormReport,
    Regularizer, SparsityReport,
};
use serde::Serialize;

use crate::config::{RunConfig, Splits};
use crate::{
    AnalyzeArgs, EvalArgs, GridArgs, PruneArgs, RunArgs, SelftestArgs, SplitName, TrainArgs,
    UsageError,
};

/// Path-norm bounds plus sparsity of one model.
#[derive(Serialize)]
struct AnalysisDoc {
    seed: u64,
    #[serde(flatten)]
    path_norm: PathNormReport,
    sparsity: SparsityReport,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    seed: u64,
    step: usize,
    optimizer: &'a psilon::training::Adam,
}

#[derive(Serialize)]
struct RunEval {
    seed: u64,
    train: EvalReport,
    val: EvalReport,
    test: EvalReport,
}

#[derive(Serialize)]
struct CellSummary {
    lambda: f64,
    dir: String,
    final_val_loss: Option<f64>,
    min_val_loss: f64,
    final_reg_value: f64,
    diverged: bool,
}

#[derive(Serialize)]
struct GridSummary {
    seed: u64,
    best_lambda: f64,
    best_index: usize,
    best_test: EvalReport,
    cells: Vec<CellSummary>,
}

fn resolve(run: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = run.steps {
        cfg.training.steps = steps;
    }
    if let Some(out) = &run.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    cfg.output_dir.clone().ok_or_else(|| {
        UsageError("no output directory: pass --out or set output_dir".into()).into()
    })
}

/// Creates `dir`, refusing to touch a non-empty one unless `overwrite` is set.
fn prepare_output(dir: &Path, overwrite: bool) -> anyhow::Result<()> {
    if dir.exists() {
        let occupied = !dir.is_dir() || std::fs::read_dir(dir)?.next().is_some();
        if occupied {
            if !overwrite {
                return Err(UsageError(format!(
                    "{} already exists; pass --overwrite to replace it",
                    dir.display()
                ))
                .into());
            }
            if dir.is_dir() {
                std::fs::remove_dir_all(dir)
            } else {
                std::fs::remove_file(dir)
            }
            .with_context(|| format!("removing {}", dir.display()))?;
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Prints pretty JSON; a closed reader is not an error.
fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    let written = serde_json::to_writer_pretty(&mut out, value)
        .map_err(std::io::Error::from)
        .and_then(|()| writeln!(out));
    match written {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn analysis(net: &Network, opts: &AnalyzeOptions, seed: u64) -> anyhow::Result<AnalysisDoc> {
    let (path_norm, warnings) = analyze_network(net, opts, &mut seeded_rng(seed))?;
    Ok(AnalysisDoc {
        seed,
        path_norm,
        sparsity: network_sparsity(net)?,
        warnings,
    })
}

/// Writes the artifacts of one training run into `dir`.
fn write_run(dir: &Path, seed: u64, result: &TrainResult, splits: &Splits) -> anyhow::Result<()> {
    let path = dir.join("metrics.csv");
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_metrics_csv(&result.rows, BufWriter::new(file))?;
    if result.divergence.is_some() {
        return Ok(());
    }
    result.net.save(&dir.join("model.json"), Some(seed))?;
    write_json(
        &dir.join("checkpoint.json"),
        &Checkpoint {
            seed,
            step: result.rows.last().map_or(0, |r| r.step),
            optimizer: &result.optimizer,
        },
    )?;
    write_json(
        &dir.join("pathnorm.json"),
        &analysis(&result.net, &AnalyzeOptions::default(), seed)?,
    )?;
    write_json(
        &dir.join("eval.json"),
        &RunEval {
            seed,
            train: evaluate(&result.net, &splits.train)?,
            val: evaluate(&result.net, &splits.val)?,
            test: evaluate(&result.net, &splits.test)?,
        },
    )?;
    Ok(())
}

pub fn train(
    args: &TrainArgs,
    window: Option<(Option<usize>, Option<usize>)>,
) -> anyhow::Result<()> {
    let mut cfg = resolve(&args.run)?;
    if let Some(lambda) = args.lambda {
        if cfg.training.regularizer == Regularizer::None {
            return Err(UsageError("--lambda needs a regularizer in the config".into()).into());
        }
        cfg.training.regularizer = cfg.training.regularizer.with_lambda(lambda);
    }
    if let Some((start, end)) = window {
        let current = cfg.training.prune_window;
        let start = start.or(current.map(|w| w.start));
        let end = end.or(current.map(|w| w.end));
        match (start, end) {
            (Some(start), Some(end)) => cfg.training.prune_window = Some(PruneWindow { start, end }),
            _ => {
                return Err(UsageError(
                    "prune needs a window: set training.prune_window or pass --prune-start and --prune-end".into(),
                )
                .into())
            }
        }
    }
    cfg.validate()?;
    let dir = output_dir(&cfg)?;
    let splits = cfg.splits()?;
    prepare_output(&dir, args.run.overwrite)?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;

    let net = init_network(&cfg.network, &mut seeded_rng(cfg.seed))?;
    let result = train_network(net, &splits.train, &splits.val, &cfg.plan())?;
    write_run(&dir, cfg.seed, &result, &splits)?;
    if let Some(d) = &result.divergence {
        return Err(d.to_error().into());
    }
    let last = result.rows.last();
    println!(
        "trained {} steps: final val loss {:.6}, wrote {}",
        last.map_or(0, |r| r.step),
        result.final_val_loss(),
        dir.display()
    );
    Ok(())
}

pub fn prune(args: &PruneArgs) -> anyhow::Result<()> {
    train(&args.train, Some((args.prune_start, args.prune_end)))
}

pub fn gridsearch(args: &GridArgs) -> anyhow::Result<()> {
    let mut cfg = resolve(&args.run)?;
    if let Some(l) = &args.lambdas {
        cfg.lambdas = Some(l.clone());
    }
    let lambdas = cfg
        .lambdas
        .clone()
        .unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
    if lambdas.is_empty() {
        return Err(UsageError("the λ grid is empty".into()).into());
    }
    if cfg.training.regularizer == Regularizer::None {
        return Err(UsageError("grid search needs a regularizer in the config".into()).into());
    }
    if args.jobs == 0 {
        return Err(UsageError("--jobs must be at least 1".into()).into());
    }
    cfg.lambdas = Some(lambdas.clone());
    cfg.validate()?;
    let dir = output_dir(&cfg)?;
    let splits = cfg.splits()?;
    prepare_output(&dir, args.run.overwrite)?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;

    let plan = cfg.plan();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()?;
    let grid = pool.install(|| {
        grid_search(
            &cfg.network,
            cfg.seed,
            &splits.train,
            &splits.val,
            &plan,
            &lambdas,
            args.jobs > 1,
        )
    })?;

    let mut cells = Vec::with_capacity(grid.cells.len());
    let curves = File::create(dir.join("curves.csv"))?;
    let mut curves = BufWriter::new(curves);
    writeln!(curves, "lambda,step,train_loss,val_loss,reg_value")?;
    for (i, cell) in grid.cells.iter().enumerate() {
        let name = format!("{i:02}_lambda_{:e}", cell.lambda);
        let cell_dir = dir.join(&name);
        std::fs::create_dir_all(&cell_dir)?;
        write_run(&cell_dir, cfg.seed, &cell.result, &splits)?;
        for r in &cell.result.rows {
            writeln!(
                curves,
                "{},{},{},{},{}",
                cell.lambda, r.step, r.train_loss, r.val_loss, r.reg_value
            )?;
        }
        let diverged = cell.result.divergence.is_some();
        cells.push(CellSummary {
            lambda: cell.lambda,
            dir: name,
            final_val_loss: (!diverged).then_some(cell.final_val_loss),
            min_val_loss: cell.min_val_loss,
            final_reg_value: cell.final_reg_value,
            diverged,
        });
    }
    curves.flush()?;
    let best = &grid.cells[grid.best_index];
    if let Some(d) = &best.result.divergence {
        return Err(d.to_error().into());
    }
    write_json(
        &dir.join("summary.json"),
        &GridSummary {
            seed: cfg.seed,
            best_lambda: grid.best_lambda,
            best_index: grid.best_index,
            best_test: evaluate(&best.result.net, &splits.test)?,
            cells,
        },
    )?;
    println!(
        "best λ = {:e} (final val loss {:.6}) of {} cells, wrote {}",
        grid.best_lambda,
        best.final_val_loss,
        grid.cells.len(),
        dir.display()
    );
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs) -> anyhow::Result<()> {
    let net = Network::load(&args.model)?;
    let opts = AnalyzeOptions {
        oracle: args.oracle,
        lipschitz_pairs: args.lipschitz_pairs,
        input_box: args.input_box,
        exact_dim_limit: args.exact_dim_limit,
    };
    let doc = analysis(&net, &opts, args.seed)?;
    for w in &doc.warnings {
        eprintln!("warning: {w}");
    }
    match &args.out {
        Some(path) => write_json(path, &doc)?,
        None => print_json(&doc)?,
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let splits = cfg.splits()?;
    let ds: &Dataset = match args.split {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    };
    let net = Network::load(&args.model)?;
    print_json(&evaluate(&net, ds)?)?;
    Ok(())
}

pub fn selftest(args: &SelftestArgs) -> anyhow::Result<()> {
    let results = psilon::selftest::run_all(args.seed);
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    if failed > 0 {
        anyhow::bail!("{failed} of {} checks failed", results.len());
    }
    Ok(())
}
