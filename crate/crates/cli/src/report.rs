//! Markdown summary of existing result CSVs. Nothing is recomputed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tttlab_core::adapt::CSV_HEADER;

use crate::rundir::require;
use crate::{CliError, CliResult};

struct Table {
    name: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read(path: &Path) -> CliResult<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()?;
    Ok(Table {
        name: path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        header,
        rows,
    })
}

fn markdown(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}|", vec!["---"; header.len()].join("|"));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn push_unique<T: PartialEq + Clone>(v: &mut Vec<T>, x: &T) -> usize {
    match v.iter().position(|y| y == x) {
        Some(i) => i,
        None => {
            v.push(x.clone());
            v.len() - 1
        }
    }
}

/// Adaptation rows pivoted to (method, checkpoint) × stream, averaged over seeds.
fn pivot_adapt(t: &Table) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let col = |name: &str| t.header.iter().position(|h| h == name).expect("adapt header");
    let (c, s, k, m, a) = (col("corruption"), col("severity"), col("checkpoint"), col("method"), col("accuracy"));
    let mut streams: Vec<String> = Vec::new();
    let mut methods: Vec<(String, String)> = Vec::new();
    let mut sums: Vec<Vec<(f64, usize)>> = Vec::new();
    for r in &t.rows {
        let acc: f64 = r[a]
            .parse()
            .map_err(|_| CliError::Runtime(format!("{}: bad accuracy `{}`", t.name, r[a])))?;
        let si = push_unique(&mut streams, &format!("{}@{}", r[c], r[s]));
        let mi = push_unique(&mut methods, &(r[m].clone(), r[k].clone()));
        if sums.len() <= mi {
            sums.push(Vec::new());
        }
        let row = &mut sums[mi];
        if row.len() <= si {
            row.resize(si + 1, (0.0, 0));
        }
        row[si].0 += acc;
        row[si].1 += 1;
    }
    let mut header = vec!["method".to_string(), "checkpoint".to_string()];
    header.extend(streams.iter().cloned());
    header.push("mean".into());
    let rows = methods
        .iter()
        .zip(&sums)
        .map(|((method, ckpt), cells)| {
            let means: Vec<Option<f64>> = (0..streams.len())
                .map(|i| cells.get(i).filter(|c| c.1 > 0).map(|c| c.0 / c.1 as f64))
                .collect();
            let present: Vec<f64> = means.iter().flatten().copied().collect();
            let mut row = vec![method.clone(), ckpt.clone()];
            row.extend(means.iter().map(|v| v.map_or_else(String::new, |v| format!("{:.2}", 100.0 * v))));
            row.push(format!("{:.2}", 100.0 * present.iter().sum::<f64>() / present.len().max(1) as f64));
            row
        })
        .collect();
    Ok((header, rows))
}

pub fn run(inputs: &[PathBuf], out: &Path, output: Option<&Path>) -> CliResult<()> {
    let files: Vec<PathBuf> = if inputs.is_empty() {
        let dir = out.join("results");
        require(&dir)?;
        let mut v: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(CliError::Missing(format!("no CSV files in {}", dir.display())));
        }
        v
    } else {
        inputs.to_vec()
    };
    let mut md = String::from("# Results\n\n");
    for f in &files {
        require(f)?;
        let t = read(f)?;
        let _ = writeln!(md, "## {}\n", t.name);
        if t.header == CSV_HEADER {
            let (h, rows) = pivot_adapt(&t)?;
            md.push_str("Accuracy in percent, mean over seeds.\n\n");
            markdown(&mut md, &h, &rows);
        } else {
            markdown(&mut md, &t.header, &t.rows);
        }
    }
    let dest = output.map_or_else(|| out.join("report.md"), Path::to_path_buf);
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&dest, md)?;
    eprintln!("wrote {}", dest.display());
    Ok(())
}
