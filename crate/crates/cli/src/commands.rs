use std::path::{Path, PathBuf};

use ann_core::autograd::gradcheck::gradcheck_block;
use ann_core::autograd::{BlockCase, GradcheckOptions};
use ann_core::bench::{
    compare, preflight, required_bytes, run_bench, BenchReport, BenchSpec, Comparison,
};
use ann_core::blocks::{init_weights, BlockKind, Eval, Normalization, Probe};
use ann_core::checks::{equivalence_suite, EquivalenceOptions};
use ann_core::cost::{reference_config, reference_table, sweep, CostReport};
use ann_core::tensor::rng::derive_seed;
use ann_core::tensor::{Distribution, Tensor};
use serde::Serialize;

use crate::annt;
use crate::config::{BenchOptions, ExperimentConfig, GRADCHECK_CAP};
use crate::error::CliError;

pub type Outcome = Result<(), CliError>;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.into()))?;
    std::fs::write(path, text + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

struct RowSums {
    max_deviation: f64,
}

impl Probe for RowSums {
    fn on_normalized(&mut self, rows: &Tensor) {
        let k = rows.shape()[1];
        for row in rows.data().chunks(k) {
            let d = (row.iter().sum::<f64>() - 1.0).abs();
            self.max_deviation = self.max_deviation.max(d);
        }
    }
}

pub fn demo(cfg: &ExperimentConfig, out: Option<&Path>) -> Outcome {
    let kind = cfg.block;
    let block = cfg.block_config(kind);
    let high = Tensor::seeded_fill(
        &cfg.shape.dims(),
        derive_seed(cfg.seed, 1),
        Distribution::Uniform,
    )?;
    let low = cfg
        .low(kind)
        .map(|s| {
            Tensor::seeded_fill(
                &s.with_channels(block.key_channels()).dims(),
                derive_seed(cfg.seed, 2),
                Distribution::Uniform,
            )
        })
        .transpose()?;
    let weights = init_weights(&block, derive_seed(cfg.seed, 3))?;
    let mut probe = RowSums { max_deviation: 0.0 };
    let y = Eval::new(&mut probe).forward(kind, &high, low.as_ref(), &block, &weights)?;

    let s = y.dims3()?;
    let min = y.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = y.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!("block {kind}, input {}, output {s}", cfg.shape);
    println!(
        "min {min:.6} mean {:.6} max {max:.6}",
        y.sum() / y.len() as f64
    );
    let row_sums_ok = match block.normalization {
        Normalization::Softmax => {
            let ok = probe.max_deviation <= 1e-12;
            println!(
                "row-sum check: max |sum - 1| = {:.3e} {}",
                probe.max_deviation,
                if ok { "PASS" } else { "FAIL" }
            );
            ok
        }
        other => {
            println!("row-sum check: skipped for {other:?} normalization");
            true
        }
    };
    if let Some(path) = out {
        annt::write(path, &y)?;
        println!("wrote {}", path.display());
    }
    if row_sums_ok {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "attention rows deviate from 1 by {:.3e}",
            probe.max_deviation
        )))
    }
}

pub fn equivalence(cfg: &ExperimentConfig, out: Option<&Path>, corrupt: bool) -> Outcome {
    if !cfg.block.is_asymmetric() {
        return Err(CliError::Config(format!(
            "block: equivalence compares a sampled block to its dense form, got {}",
            cfg.block
        )));
    }
    let defaults = EquivalenceOptions::default();
    let opts = EquivalenceOptions {
        cases: cfg.equivalence.as_ref().map_or(defaults.cases, |e| e.cases),
        max_side: cfg
            .equivalence
            .as_ref()
            .map_or(defaults.max_side, |e| e.max_side),
        seed: cfg.seed,
        corrupt,
    };
    let report = equivalence_suite(cfg.block, &opts)?;
    println!(
        "{} (identity sampler) vs {}: {} cases, max deviation {:.3e}, tolerance {:.0e}: {}",
        report.block,
        report.reference,
        report.cases.len(),
        report.max_deviation,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "deviation {:.3e} at seed {}",
            report.max_deviation, report.worst_seed
        )))
    }
}

fn print_csv(rows: &[CostReport]) {
    println!("{}", CostReport::CSV_HEADER);
    for r in rows {
        println!("{}", r.csv_row());
    }
}

fn write_rows(path: &Path, rows: &[CostReport]) -> Outcome {
    if path.extension().is_some_and(|e| e == "json") {
        return write_json(path, &rows);
    }
    let mut text = format!("{}\n", CostReport::CSV_HEADER);
    for r in rows {
        text += &r.csv_row();
        text.push('\n');
    }
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn flops(cfg: Option<&ExperimentConfig>, table1: bool, out: Option<&Path>) -> Outcome {
    if table1 {
        return reference_flops(out);
    }
    let cfg = cfg.ok_or_else(|| {
        CliError::Config("config: flops needs --config unless --table1 is given".into())
    })?;
    let sw = cfg.sweep.as_ref();
    let shapes = match sw {
        Some(s) if !s.shapes.is_empty() => s.shapes.clone(),
        _ => vec![cfg.shape],
    };
    let kinds = match sw {
        Some(s) if !s.blocks.is_empty() => s.blocks.clone(),
        _ => vec![cfg.block],
    };
    let configs: Vec<_> = kinds.iter().map(|&k| (k, cfg.block_config(k))).collect();
    let element_bytes = sw.map_or(ann_core::cost::DEFAULT_ELEMENT_BYTES, |s| s.element_bytes);
    let rows = sweep(&shapes, &configs, element_bytes)?;
    print_csv(&rows);
    if let Some(path) = out {
        write_rows(path, &rows)?;
    }
    Ok(())
}

fn reference_flops(out: Option<&Path>) -> Outcome {
    let rows = reference_table()?;
    println!(
        "{:<6} {:>9} {:>16} {:>16} {:>10} {:>10}  status",
        "block", "size", "estimated GMACs", "reference GMACs", "rel diff", "tolerance"
    );
    let mut failed = Vec::new();
    for r in &rows {
        let status = match r.within_tolerance() {
            Some(true) => "PASS",
            Some(false) => {
                failed.push(format!("{} {}x{}", r.block, r.width, r.height));
                "FAIL"
            }
            None => "reported",
        };
        println!(
            "{:<6} {:>9} {:>16.2} {:>16.1} {:>9.2}% {:>10}  {status}",
            r.block.to_string(),
            format!("{}x{}", r.width, r.height),
            r.estimated_gmacs,
            r.reference_gmacs,
            100.0 * r.relative_difference,
            r.tolerance
                .map_or("-".to_string(), |t| format!("{}%", t * 100.0)),
        );
    }
    let cfg = reference_config();
    let shapes: Vec<_> = rows
        .iter()
        .map(|r| ann_core::Shape3::new(cfg.in_channels, r.height, r.width))
        .collect();
    let estimates: Vec<CostReport> = rows
        .iter()
        .zip(&shapes)
        .map(|(r, &s)| {
            ann_core::cost::estimate(
                r.block,
                s,
                None,
                &cfg,
                ann_core::cost::DEFAULT_ELEMENT_BYTES,
            )
        })
        .collect::<Result<_, _>>()?;
    println!();
    print_csv(&estimates);
    if let Some(path) = out {
        write_json(path, &rows)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "outside tolerance: {}",
            failed.join(", ")
        )))
    }
}

pub fn gradcheck(cfg: &ExperimentConfig, out: Option<&Path>) -> Outcome {
    let kind = cfg.block;
    let block = cfg.block_config(kind);
    let low = cfg.low(kind).map(|s| s.with_channels(block.key_channels()));
    for (name, shape) in [("shape", Some(cfg.shape)), ("low_shape", low)] {
        if let Some(s) = shape {
            if s.numel() > GRADCHECK_CAP {
                return Err(CliError::Config(format!(
                    "{name}: C·H·W = {} exceeds the gradcheck cap of {GRADCHECK_CAP}",
                    s.numel()
                )));
            }
        }
    }
    let defaults = GradcheckOptions::default();
    let opts = GradcheckOptions {
        eps: cfg
            .gradcheck
            .as_ref()
            .and_then(|g| g.eps)
            .unwrap_or(defaults.eps),
        tolerance: cfg
            .gradcheck
            .as_ref()
            .and_then(|g| g.tolerance)
            .unwrap_or(defaults.tolerance),
        seed: derive_seed(cfg.seed, 4),
        ..defaults
    };
    let case = BlockCase::random(kind, &block, cfg.shape, low, cfg.seed)?;
    let report = gradcheck_block(&case, &opts)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.into()))?;
    println!("{text}");
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "max relative error {:.3e} >= {:.0e}",
            report.max_rel_error, opts.tolerance
        )))
    }
}

#[derive(Debug, Serialize, serde::Deserialize, PartialEq)]
pub struct BenchOutput {
    pub reports: Vec<BenchReport>,
    pub comparisons: Vec<Comparison>,
}

fn thread_override() -> Result<Option<usize>, CliError> {
    match std::env::var("ANN_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Config(format!(
                "ANN_THREADS: expected a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(None),
    }
}

pub fn bench(cfg: &ExperimentConfig, full: bool, out: Option<&Path>) -> Outcome {
    let opts = cfg.bench.clone().unwrap_or_default();
    let threads = thread_override()?.unwrap_or(opts.threads);
    let kinds = if opts.blocks.is_empty() {
        vec![cfg.block]
    } else {
        opts.blocks.clone()
    };
    let specs: Vec<BenchSpec> = kinds
        .iter()
        .map(|&k| bench_spec(cfg, &opts, k, threads, full))
        .collect();
    for spec in &specs {
        spec.validate()?;
        if full {
            preflight(spec).map_err(|e| {
                CliError::Resource(format!(
                    "{e}; a full-size run needs {} bytes",
                    required_bytes(spec)
                ))
            })?;
        }
    }
    let mut reports = Vec::new();
    for spec in &specs {
        let report = run_bench(spec)?;
        print!("{}", report.table());
        println!();
        reports.push(report);
    }
    let comparisons = reports[1..]
        .iter()
        .map(|r| compare(&reports[0], r))
        .collect::<Result<Vec<_>, _>>()?;
    for c in &comparisons {
        print!("{}", c.table());
    }
    if let Some(path) = out {
        let output = BenchOutput {
            reports,
            comparisons,
        };
        write_json(path, &output)?;
        let csv = csv_path(path);
        let mut text = format!("{}\n", BenchReport::CSV_HEADER);
        for r in &output.reports {
            for row in r.csv_rows() {
                text += &row;
                text.push('\n');
            }
        }
        std::fs::write(&csv, text)?;
        println!("wrote {}", csv.display());
    }
    Ok(())
}

fn csv_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "csv") {
        path.with_extension("phases.csv")
    } else {
        path.with_extension("csv")
    }
}

fn bench_spec(
    cfg: &ExperimentConfig,
    opts: &BenchOptions,
    kind: BlockKind,
    threads: usize,
    full: bool,
) -> BenchSpec {
    BenchSpec {
        block: kind,
        shape: cfg.shape,
        low_shape: cfg.low(kind),
        config: cfg.block_config(kind),
        warmup: opts.warmup,
        measured: opts.measured,
        seed: cfg.seed,
        threads,
        tile_budget: (!full).then_some(opts.tile_budget_bytes),
    }
}
