use std::path::{Path, PathBuf};

use dimerge_core::diagnostics::{diagnose, export_csv, export_json};
use dimerge_core::merge::{merge_checkpoint, MergeReport};
use dimerge_core::store::{load_checkpoint, remap_keys, save_checkpoint, Checkpoint, Role};
use log::info;
use serde::Serialize;

use crate::config::{existing_input, load_run_config, RemapSpec, RunConfig};
use crate::error::{CliError, CliResult};
use crate::RunArgs;

/// Report file contents: the fully resolved config next to the merge report.
#[derive(Serialize)]
struct ReportFile<'a> {
    config: &'a RunConfig,
    report: &'a MergeReport,
}

fn resolve(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = load_run_config(args.config.as_deref(), &args.sets)?;
    if let Some(t) = args.threads {
        if t == 0 {
            return Err(CliError::Invalid("--threads must be positive".into()));
        }
        cfg.threads = Some(t);
    }
    if let Some(o) = &args.output {
        cfg.output_path = Some(o.clone());
    }
    Ok(cfg)
}

fn pool(threads: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Invalid(format!("worker pool: {e}")))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => absolute(a) == absolute(b),
    }
}

fn load(path: &Path, role: Role, remap: &RemapSpec) -> CliResult<Checkpoint> {
    let ckpt = load_checkpoint(path, role)?;
    info!("loaded {} tensors from {}", ckpt.len(), path.display());
    Ok(remap_keys(ckpt, &remap.rules())?)
}

struct Inputs {
    base: PathBuf,
    ml: PathBuf,
    anchor: PathBuf,
}

fn inputs(cfg: &RunConfig) -> CliResult<Inputs> {
    Ok(Inputs {
        base: existing_input("base_path", &cfg.base_path)?,
        ml: existing_input("multilingual_path", &cfg.multilingual_path)?,
        anchor: existing_input("anchor_path", &cfg.anchor_path)?,
    })
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn io_err(context: &'static str, path: &Path) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.to_path_buf();
    move |source| CliError::Io { context, path, source }
}

/// Runs `write` against a scratch path next to `target`, then renames it
/// into place. The scratch area is removed on failure.
fn write_atomic(target: &Path, overwrite: bool, write: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
    let parent = parent_dir(target);
    let scratch = tempfile::Builder::new()
        .prefix(".dimerge-")
        .tempdir_in(&parent)
        .map_err(io_err("cannot create scratch directory in", &parent))?;
    let name = target
        .file_name()
        .ok_or_else(|| CliError::Invalid(format!("output path {} has no file name", target.display())))?;
    let staged = scratch.path().join(name);
    write(&staged)?;
    if target.exists() {
        if !overwrite {
            return Err(CliError::OutputExists(target.to_path_buf()));
        }
        if target.is_dir() {
            std::fs::remove_dir_all(target).map_err(io_err("cannot replace", target))?;
        }
    }
    std::fs::rename(&staged, target).map_err(io_err("cannot move output to", target))
}

fn default_report_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".report.json");
    output.with_file_name(name)
}

pub fn cmd_merge(args: &RunArgs) -> CliResult<()> {
    let cfg = resolve(args)?;
    let inputs = inputs(&cfg)?;
    let output = cfg.output_path.clone().ok_or(CliError::MissingPath {
        field: "output_path",
        path: "<unset>".into(),
    })?;
    for (field, p) in [
        ("base_path", &inputs.base),
        ("multilingual_path", &inputs.ml),
        ("anchor_path", &inputs.anchor),
    ] {
        if same_path(p, &output) {
            return Err(CliError::OutputConflict { field, path: output });
        }
    }
    if output.exists() && !cfg.overwrite {
        return Err(CliError::OutputExists(output));
    }
    let report_path = cfg.report_path.clone().unwrap_or_else(|| default_report_path(&output));

    let pool = pool(cfg.threads)?;
    let (merged, report) = pool.install(|| -> CliResult<_> {
        let base = load(&inputs.base, Role::Base, &cfg.remap.base)?;
        let ml = load(&inputs.ml, Role::Multilingual, &cfg.remap.multilingual)?;
        let anchor = load(&inputs.anchor, Role::Anchor, &cfg.remap.anchor)?;
        let (merged, report) = merge_checkpoint(&base, &ml, &anchor, &cfg.merge)?;
        Ok((merged.restore_original_names()?, report))
    })?;

    write_atomic(&output, cfg.overwrite, |staged| {
        save_checkpoint(&merged, staged, cfg.shard_limit_bytes)?;
        Ok(())
    })?;
    let body = serde_json::to_string_pretty(&ReportFile {
        config: &cfg,
        report: &report,
    })
    .expect("report serializes");
    write_atomic(&report_path, true, |staged| {
        std::fs::write(staged, body).map_err(io_err("cannot write report", staged))
    })?;

    let mean = report
        .mean_omega_ml
        .map_or_else(|| "n/a".to_string(), |w| format!("{w:.4}"));
    println!(
        "merged {} tensors, passed through {}, mean omega_ml {mean}, method {} -> {}",
        report.merged_count,
        report.passthrough_count,
        report.method,
        output.display()
    );
    Ok(())
}

pub fn cmd_diagnose(args: &RunArgs) -> CliResult<()> {
    let cfg = resolve(args)?;
    let inputs = inputs(&cfg)?;
    let csv_path = args
        .output
        .clone()
        .or_else(|| cfg.diagnostics.csv_path.clone())
        .ok_or(CliError::MissingPath {
            field: "diagnostics.csv_path",
            path: "<unset>".into(),
        })?;
    let pool = pool(cfg.threads)?;
    let diagnosis = pool.install(|| -> CliResult<_> {
        let base = load(&inputs.base, Role::Base, &cfg.remap.base)?;
        let ml = load(&inputs.ml, Role::Multilingual, &cfg.remap.multilingual)?;
        let anchor = load(&inputs.anchor, Role::Anchor, &cfg.remap.anchor)?;
        Ok(diagnose(&base, &ml, &anchor, &cfg.diagnostics.schema.schema(), cfg.merge.epsilon)?)
    })?;
    for w in &diagnosis.warnings {
        eprintln!("warning: {w}");
    }
    write_atomic(&csv_path, true, |staged| Ok(export_csv(&diagnosis.rows, staged)?))?;
    if let Some(json_path) = &cfg.diagnostics.json_path {
        write_atomic(json_path, true, |staged| Ok(export_json(&diagnosis.rows, staged)?))?;
    }
    println!("{} rows -> {}", diagnosis.rows.len(), csv_path.display());
    Ok(())
}

pub fn cmd_inspect(path: &Path) -> CliResult<()> {
    if !path.exists() {
        return Err(CliError::MissingPath {
            field: "checkpoint",
            path: path.display().to_string(),
        });
    }
    let ckpt = load_checkpoint(path, Role::Anchor)?;
    for r in ckpt.iter() {
        println!("{}\t{}\t{:?}", r.name(), r.dtype(), r.shape());
    }
    println!("tensors: {}, parameters: {}", ckpt.len(), ckpt.parameter_count());
    Ok(())
}
