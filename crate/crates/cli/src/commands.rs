use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use deepexp::bbvi::{fit, FitObserver, StopReason, TraceRecord};
use deepexp::data::{self, Format, SparseCounts};
use deepexp::eval::{evaluate, EvalReport};
use deepexp::hierarchy;
use deepexp::model::{ancestral_sample, DefArchitecture, LatentState};
use deepexp::rng;
use deepexp::variational::{Checkpoint, VariationalState};
use serde::Serialize;

use crate::config::{read_input, require, RunConfig};
use crate::failure::{usage, Failure};

// Stream keys under the run seed.
const KEY_FIT: u64 = 1;
const KEY_EVAL: u64 = 2;
const KEY_SIMULATE: u64 = 3;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn out_dir(c: &RunConfig) -> Result<&Path, Failure> {
    fs::create_dir_all(&c.out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", c.out.display())))?;
    Ok(&c.out)
}

fn load_data(c: &RunConfig, n_items: Option<usize>) -> Result<SparseCounts, Failure> {
    let path = require(&c.data, "--data")?;
    // read first so a missing file is reported by path
    read_input(path)?;
    let mut d = usage(data::load_bow(path, c.format))?;
    // TSV shapes are inferred from the largest index present
    if let Some(n) = n_items {
        if c.format == Format::Tsv && d.n_cols() < n {
            d = usage(SparseCounts::from_triplets(
                d.n_rows(),
                n,
                d.triplets().collect(),
            ))?;
        }
    }
    if let Some(v) = &c.vocab {
        read_input(v)?;
        let names = usage(data::load_vocab(v))?;
        d = usage(d.with_col_names(names))?;
    }
    Ok(d)
}

fn check_items(arch: &DefArchitecture, d: &SparseCounts) -> Result<(), Failure> {
    if arch.n_items() != d.n_cols() {
        return Err(Failure::Usage(format!(
            "architecture has {} items but the data has {} columns",
            arch.n_items(),
            d.n_cols()
        )));
    }
    Ok(())
}

/// Appends trace records to `trace.jsonl` and writes periodic checkpoints.
struct RunObserver<'a> {
    arch: &'a DefArchitecture,
    trace: BufWriter<File>,
    checkpoints: PathBuf,
}

impl FitObserver for RunObserver<'_> {
    fn on_record(&mut self, record: &TraceRecord) -> deepexp::Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.trace, "{line}").map_err(|e| deepexp::DefError::Data(format!("trace: {e}")))
    }

    fn on_checkpoint(&mut self, iteration: usize, state: &VariationalState) -> deepexp::Result<()> {
        self.trace
            .flush()
            .map_err(|e| deepexp::DefError::Data(format!("trace: {e}")))?;
        let path = self
            .checkpoints
            .join(format!("checkpoint-{iteration:06}.json"));
        state.to_checkpoint(self.arch).save(&path)
    }
}

#[derive(Debug, Serialize)]
struct TrainReport {
    architecture_hash: String,
    n_train: usize,
    n_validation: usize,
    n_heldout: usize,
    iterations: usize,
    stop: StopReason,
    skipped_iterations: usize,
    final_elbo_estimate: Option<f64>,
    heldout: Option<EvalReport>,
}

pub fn train(c: &RunConfig) -> Result<(), Failure> {
    let probe = load_data(c, None)?;
    let arch = c
        .architecture(Some(probe.n_cols()))?
        .ok_or_else(|| Failure::Usage("missing --arch or --arch-file".into()))?;
    let d = load_data(c, Some(arch.n_items()))?;
    check_items(&arch, &d)?;
    let parts = usage(data::split(d.n_rows(), c.split, c.seed))?;
    let train = usage(d.select_rows(&parts.train))?;
    let validation = usage(d.select_rows(&parts.validation))?;
    let heldout = usage(d.select_rows(&parts.heldout))?;
    if train.n_rows() == 0 {
        return Err(Failure::Usage("the split leaves no training rows".into()));
    }

    let out = out_dir(c)?;
    write_json(&out.join("config.json"), c)?;
    write_json(&out.join("architecture.json"), &arch)?;
    write_json(&out.join("split.json"), &parts)?;
    let checkpoints = out.join("checkpoints");
    if c.optimizer.checkpoint_interval > 0 {
        fs::create_dir_all(&checkpoints)?;
    }
    let trace_path = out.join("trace.jsonl");
    let trace = File::create(&trace_path)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", trace_path.display())))?;
    let mut obs = RunObserver {
        arch: &arch,
        trace: BufWriter::new(trace),
        checkpoints,
    };
    let mut r = rng::substream(c.seed, &[KEY_FIT]);
    let result = fit(
        &arch,
        &train,
        (validation.n_rows() > 0).then_some(&validation),
        &c.optimizer,
        &mut r,
        &mut obs,
    )?;
    obs.trace.flush()?;
    result
        .state
        .to_checkpoint(&arch)
        .save(&out.join("checkpoint.json"))?;

    let heldout_report = if heldout.n_rows() > 0 && heldout.total() > 0 {
        let mut er = rng::substream(c.seed, &[KEY_EVAL]);
        Some(evaluate(&arch, &result.state, &heldout, &c.eval, &mut er)?)
    } else {
        None
    };
    let report = TrainReport {
        architecture_hash: arch.hash(),
        n_train: train.n_rows(),
        n_validation: validation.n_rows(),
        n_heldout: heldout.n_rows(),
        iterations: result.trace.len(),
        stop: result.stop,
        skipped_iterations: result.skipped_iterations,
        final_elbo_estimate: result.trace.last().map(|t| t.elbo_estimate),
        heldout: heldout_report,
    };
    write_json(&out.join("report.json"), &report)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn load_checkpoint(c: &RunConfig) -> Result<(DefArchitecture, VariationalState), Failure> {
    let path = require(&c.checkpoint, "--checkpoint")?;
    read_input(path)?;
    let ckpt = usage(Checkpoint::load(path))?;
    let arch = match c.architecture(Some(ckpt.architecture.n_items()))? {
        Some(expected) => {
            usage(Checkpoint::load_for(path, &expected))?;
            expected
        }
        None => {
            // the stored hash must still match the stored architecture
            usage(Checkpoint::load_for(path, &ckpt.architecture))?;
            ckpt.architecture.clone()
        }
    };
    let vs = usage(VariationalState::from_checkpoint(&ckpt))?;
    Ok((arch, vs))
}

pub fn eval(c: &RunConfig) -> Result<(), Failure> {
    let (arch, vs) = load_checkpoint(c)?;
    let d = load_data(c, Some(arch.n_items()))?;
    check_items(&arch, &d)?;
    let out = out_dir(c)?;
    write_json(&out.join("config.json"), c)?;
    let mut r = rng::substream(c.seed, &[KEY_EVAL]);
    let report = evaluate(&arch, &vs, &d, &c.eval, &mut r)?;
    write_json(&out.join("report.json"), &report)?;
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| Failure::Runtime(e.to_string()))?
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Truth<'a> {
    architecture_hash: String,
    state: &'a LatentState,
}

pub fn simulate(c: &RunConfig) -> Result<(), Failure> {
    let arch = c
        .architecture(c.items)?
        .ok_or_else(|| Failure::Usage("missing --arch or --arch-file".into()))?;
    let out = out_dir(c)?;
    write_json(&out.join("config.json"), c)?;
    write_json(&out.join("architecture.json"), &arch)?;
    let mut r = rng::substream(c.seed, &[KEY_SIMULATE]);
    let (state, d) = ancestral_sample(&arch, c.rows, &mut r)?;
    let name = match c.format {
        Format::UciBow => "data.bow",
        Format::Tsv => "data.tsv",
    };
    data::write_bow(&out.join(name), &d, c.format)?;
    write_json(
        &out.join("truth.json"),
        &Truth {
            architecture_hash: arch.hash(),
            state: &state,
        },
    )?;
    Ok(())
}

pub fn export_hierarchy(c: &RunConfig) -> Result<(), Failure> {
    let (arch, vs) = load_checkpoint(c)?;
    let names = match &c.vocab {
        Some(p) => {
            read_input(p)?;
            Some(usage(data::load_vocab(p))?)
        }
        None => None,
    };
    if let Some(n) = &names {
        if n.len() != arch.n_items() {
            return Err(Failure::Usage(format!(
                "vocabulary has {} names for {} items",
                n.len(),
                arch.n_items()
            )));
        }
    }
    let h = hierarchy::export(&arch, &vs, c.top_m, names.as_deref())?;
    let out = out_dir(c)?;
    write_json(&out.join("config.json"), c)?;
    fs::write(out.join("hierarchy.json"), h.to_json() + "\n")?;
    fs::write(out.join("hierarchy.dot"), h.to_dot())?;
    Ok(())
}
