use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::mpsc;

use rayon::prelude::*;
use tttlab_core::adapt::{AdaptReport, TestStream};
use tttlab_core::config::ExperimentConfig;
use tttlab_core::data::{entropy_shift, generate_dataset, load_dump, save_dump, Dataset};
use tttlab_core::nn::BnMode;
use tttlab_core::train::{evaluate, write_log_jsonl};
use tttlab_core::{parallel, pipeline};

use crate::rundir::{require, RunDir};
use crate::{CliError, CliResult, Common, Grid};

fn load_data(run: &RunDir, name: &str) -> CliResult<Dataset> {
    let p = run.path(&format!("data/{name}.bin"));
    require(&p)?;
    Ok(load_dump(&p)?)
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn gen_data(c: &Common) -> CliResult<()> {
    let run = RunDir::open(c)?;
    run.record_config()?;
    let dir = run.dir("data")?;
    let (train, test) = generate_dataset(&run.config.dataset)?;
    save_dump(dir.join("train.bin"), &train)?;
    save_dump(dir.join("test.bin"), &test)?;
    eprintln!("wrote {} train and {} test images to {}", train.len(), test.len(), dir.display());
    Ok(())
}

pub fn train(c: &Common, seed: Option<u64>) -> CliResult<()> {
    let run = RunDir::open(c)?;
    let train = load_data(&run, "train")?;
    let test = load_data(&run, "test")?;
    run.record_config()?;
    let models = run.dir("models")?;
    let logs = run.dir("logs")?;
    for s in run.seeds(seed) {
        let (tr, log) = pipeline::train_seed(&run.config, &train, &test, s, |l| {
            eprintln!(
                "seed {s} epoch {:>3}: loss {:.4} ce {:.4} im {:.4} H(Z) {:.4} test acc {:.4}",
                l.epoch, l.total, l.ce, l.im, l.h_marg, l.test_acc
            )
        })?;
        tr.save(models.join(format!("seed{s}.ckpt")))?;
        write_log_jsonl(BufWriter::new(File::create(logs.join(format!("train_seed{s}.jsonl")))?), &log)?;
    }
    Ok(())
}

fn load_models(run: &RunDir, seeds: &[u64]) -> CliResult<Vec<tttlab_core::nn::ModelBundle<f32>>> {
    seeds
        .iter()
        .map(|&s| {
            let p = run.model_path(s);
            require(&p)?;
            Ok(pipeline::load_model(&run.config, s, &p)?)
        })
        .collect()
}

pub fn adapt(c: &Common, seed: Option<u64>) -> CliResult<()> {
    let run = RunDir::open(c)?;
    let test = load_data(&run, "test")?;
    let seeds = run.seeds(seed);
    let models = load_models(&run, &seeds)?;
    run.record_config()?;
    let dir = run.dir("results")?;
    let mut all = Vec::new();
    for (&s, model) in seeds.iter().zip(&models) {
        let report = pipeline::adapt_seed(&run.config, model, &test, s)?;
        report.save(dir.join(format!("adapt_seed{s}.csv")), dir.join(format!("adapt_seed{s}.json")))?;
        let sum = report.summary();
        eprintln!(
            "seed {s}: no-adapt {} ptbn {} adapted(max) {:.4} tent(max) {}",
            opt(sum.mean_no_adapt),
            opt(sum.mean_ptbn),
            sum.mean_clust3_max,
            opt(sum.mean_tent_max)
        );
        all.push(report);
    }
    write_merged(&dir.join("adapt.csv"), &all)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn write_merged(path: &Path, reports: &[AdaptReport]) -> CliResult<()> {
    let mut buf = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        let mut one = Vec::new();
        r.write_csv(&mut one)?;
        let body = if i == 0 {
            &one[..]
        } else {
            let nl = one.iter().position(|&b| b == b'\n').map_or(one.len(), |p| p + 1);
            &one[nl..]
        };
        buf.extend_from_slice(body);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn eval(c: &Common, seed: Option<u64>) -> CliResult<()> {
    let run = RunDir::open(c)?;
    let test = load_data(&run, "test")?;
    let seeds = run.seeds(seed);
    let models = load_models(&run, &seeds)?;
    run.record_config()?;
    let dir = run.dir("results")?;
    let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
    w.write_record(["seed", "corruption", "severity", "bn", "accuracy"])?;
    let batch = run.config.adapt.batch_size;
    for (&s, model) in seeds.iter().zip(&models) {
        let mut streams = vec![TestStream::clean(test.clone())];
        streams.extend(pipeline::streams(&run.config, &test, s)?);
        for st in &streams {
            for (name, mode) in [("eval", BnMode::Eval), ("batch", BnMode::BatchOnly)] {
                let acc = evaluate(model, &st.data, mode, batch)?.accuracy;
                w.write_record([s.to_string(), st.corruption.clone(), st.severity.to_string(), name.into(), f6(acc)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn fig1(c: &Common, k: Option<usize>, n: Option<usize>, seed: Option<u64>) -> CliResult<()> {
    let mut c = c.clone();
    if let Some(k) = k {
        c.set.push(format!("fig1.ks=[{k}]"));
    }
    if let Some(n) = n {
        c.set.push(format!("fig1.n={n}"));
    }
    if let Some(s) = seed {
        c.set.push(format!("fig1.seed={s}"));
    }
    let run = RunDir::open(&c)?;
    run.record_config()?;
    let f = &run.config.fig1;
    let dir = run.dir("results")?;
    let mut w = csv::Writer::from_path(dir.join("fig1.csv"))?;
    w.write_record(["k", "source_bits", "target_bits", "delta_mi_bits"])?;
    println!("{:>4} {:>12} {:>12} {:>12}", "K", "source H", "target H", "ΔMI");
    for &k in &f.ks {
        let r = entropy_shift(&f.distribution, k, f.n, f.seed)?;
        println!("{:>4} {:>12.4} {:>12.4} {:>12.4}", r.k, r.source_bits, r.target_bits, r.delta_mi_bits);
        w.write_record([r.k.to_string(), f6(r.source_bits), f6(r.target_bits), f6(r.delta_mi_bits)])?;
    }
    w.flush()?;
    Ok(())
}

/// Grid cells as `(label, config)`.
pub fn grid_cells(base: &ExperimentConfig, grid: Grid) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match grid {
        Grid::Layers => [vec![1], vec![2], vec![1, 2], vec![1, 2, 3, 4]]
            .into_iter()
            .map(|l| {
                let label = l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("+");
                (label, with(&|c| c.model.projectors.layers = l.clone()))
            })
            .collect(),
        Grid::K => [2, 5, 10, 20, 50, 100]
            .into_iter()
            .map(|k| (k.to_string(), with(&|c| c.model.projectors.k = k)))
            .collect(),
        Grid::Heads => [1, 5, 10, 15, 20]
            .into_iter()
            .map(|h| (h.to_string(), with(&|c| c.model.projectors.heads = h)))
            .collect(),
    }
}

fn grid_name(g: Grid) -> &'static str {
    match g {
        Grid::Layers => "layers",
        Grid::K => "k",
        Grid::Heads => "heads",
    }
}

fn ablate_cell(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, seed: u64) -> CliResult<Vec<String>> {
    let (tr, log) = pipeline::train_seed(cfg, train, test, seed, |_| {})?;
    let sum = pipeline::adapt_seed(cfg, &tr.model, test, seed)?.summary();
    let last = log.last().map_or(f64::NAN, |l| l.test_acc);
    let o = |v: Option<f64>| v.map(f6).unwrap_or_default();
    Ok(vec![
        f6(last),
        o(sum.mean_no_adapt),
        o(sum.mean_ptbn),
        f6(sum.mean_clust3_max),
        o(sum.mean_tent_max),
    ])
}

pub fn ablate(c: &Common, grid: Grid, seed: Option<u64>) -> CliResult<()> {
    let run = RunDir::open(c)?;
    let train = load_data(&run, "train")?;
    let test = load_data(&run, "test")?;
    let cells = grid_cells(&run.config, grid);
    for (label, cfg) in &cells {
        cfg.validate()
            .map_err(|e| CliError::Config(format!("grid cell {label}: {e}")))?;
    }
    run.record_config()?;
    let dir = run.dir("results")?;
    let jobs: Vec<(usize, &str, &ExperimentConfig, u64)> = cells
        .iter()
        .flat_map(|(label, cfg)| run.seeds(seed).into_iter().map(move |s| (label.as_str(), cfg, s)))
        .enumerate()
        .map(|(i, (l, c, s))| (i, l, c, s))
        .collect();

    // one writer owns the file; rows arrive in any order and leave in job order
    let path = dir.join(format!("ablate_{}.csv", grid_name(grid)));
    let (tx, rx) = mpsc::channel::<(usize, Vec<String>)>();
    let writer = std::thread::spawn(move || -> CliResult<usize> {
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["grid", "cell", "seed", "source_accuracy", "no_adapt", "ptbn", "clust3_max", "tent_max"])?;
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (i, row) in rx {
            pending.insert(i, row);
            while let Some(row) = pending.remove(&next) {
                w.write_record(&row)?;
                w.flush()?;
                next += 1;
            }
        }
        Ok(next)
    });
    let gname = grid_name(grid);
    let pool = parallel::pool()?;
    let result: CliResult<()> = pool.install(|| {
        jobs.par_iter().try_for_each_with(tx, |tx, &(i, label, cfg, s)| {
            let stats = ablate_cell(cfg, &train, &test, s)?;
            eprintln!("{gname} {label} seed {s}: {}", stats.join(" "));
            let mut row = vec![gname.to_string(), label.to_string(), s.to_string()];
            row.extend(stats);
            tx.send((i, row)).map_err(|e| CliError::Runtime(e.to_string()))
        })
    });
    let written = writer.join().map_err(|_| CliError::Runtime("csv writer panicked".into()))??;
    result?;
    if written != jobs.len() {
        return Err(CliError::Runtime(format!("wrote {written} of {} rows", jobs.len())));
    }
    Ok(())
}
