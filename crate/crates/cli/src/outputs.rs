//! Artifact persistence: atomic writes, tidy CSV emission, and the run
//! manifest.
//!
//! Every command writes its artifacts through an [`ArtifactSink`], which
//! records relative paths and finishes by writing `manifest.json`. Data
//! artifacts (CSV/JSON) are deterministic for a fixed (config, seed); wall
//! clock and timestamps go to `run.log` only.

use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use statetrack_core::diagnostics::{
    CrossingReport, GainReport, PerturbationTrace, SeparationTrace, SubspaceTrace,
};
use statetrack_core::error::{Error, Result};
use statetrack_core::network::atomic_write;
use statetrack_core::training::RunRecord;

/// Manifest of one command invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    /// Relative paths of every emitted file (sorted).
    pub artifacts: Vec<String>,
}

pub struct ArtifactSink {
    root: PathBuf,
    files: Vec<String>,
    log_lines: Vec<String>,
}

impl ArtifactSink {
    pub fn new(root: &Path) -> Result<ArtifactSink> {
        std::fs::create_dir_all(root)?;
        Ok(ArtifactSink { root: root.to_path_buf(), files: Vec::new(), log_lines: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        atomic_write(&path, bytes)?;
        self.files.push(rel.to_string());
        Ok(path)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        self.write_bytes(rel, text.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(rel, &text)
    }

    /// Wall-clock and provenance lines; lands in run.log, not in data files.
    pub fn log(&mut self, line: impl Into<String>) {
        self.log_lines.push(line.into());
    }

    /// Record a file created outside the sink (e.g. a checkpoint directory).
    pub fn record_external(&mut self, rel: &str) {
        self.files.push(rel.to_string());
    }

    /// Write run.log and manifest.json; every emitted file is listed.
    pub fn finish(mut self, config_hash: &str, seeds: &[u64]) -> Result<()> {
        if !self.log_lines.is_empty() {
            let mut text = self.log_lines.join("\n");
            text.push('\n');
            let path = self.root.join("run.log");
            atomic_write(&path, text.as_bytes())?;
            self.files.push("run.log".into());
        }
        self.files.sort();
        self.files.dedup();
        let manifest = RunManifest {
            config_hash: config_hash.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: seeds.to_vec(),
            artifacts: self.files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        atomic_write(&self.root.join("manifest.json"), text.as_bytes())?;
        Ok(())
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

// ── tidy CSV emission ───────────────────────────────────────────────

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => String::new(),
    }
}

/// One row per (t, quantity, space): r/m/q in readout and latent space plus
/// a flagged indicator.
pub fn separation_csv(trace: &SeparationTrace) -> String {
    let mut out = String::from("t,quantity,space,value\n");
    for (i, s) in trace.steps.iter().enumerate() {
        let t = i + 1;
        let _ = writeln!(out, "{t},r,readout,{}", s.r_readout);
        let _ = writeln!(out, "{t},m,readout,{}", s.m_readout);
        let _ = writeln!(out, "{t},q,readout,{}", fmt_opt(s.q_readout));
        let _ = writeln!(out, "{t},r,latent,{}", s.r_latent);
        let _ = writeln!(out, "{t},m,latent,{}", s.m_latent);
        let _ = writeln!(out, "{t},q,latent,{}", fmt_opt(s.q_latent));
        let _ = writeln!(out, "{t},flagged,both,{}", if s.flagged { 1 } else { 0 });
    }
    out
}

pub fn subspace_csv(trace: &SubspaceTrace) -> String {
    let mut out = String::from("t,quantity,space,value\n");
    for (i, s) in trace.steps.iter().enumerate() {
        let t = i + 1;
        let _ = writeln!(out, "{t},r_err_u,latent,{}", fmt_opt(Some(s.r_err_u).filter(|v| v.is_finite())));
        let _ = writeln!(out, "{t},r_err_perp,latent,{}", fmt_opt(Some(s.r_err_perp).filter(|v| v.is_finite())));
        let _ = writeln!(out, "{t},r_sep,latent,{}", s.r_sep);
        let _ = writeln!(out, "{t},q_u,latent,{}", fmt_opt(s.q_u));
        let _ = writeln!(out, "{t},q_perp,latent,{}", fmt_opt(s.q_perp));
        let _ = writeln!(out, "{t},flagged,latent,{}", if s.flagged { 1 } else { 0 });
    }
    out
}

/// Median and IQR of the error ratio per absolute step t ≥ t0.
pub fn perturbation_csv(trace: &PerturbationTrace) -> String {
    let mut out = String::from("t,quantity,space,value\n");
    for k in 0..trace.horizon {
        let t = trace.t0 + k;
        let _ = writeln!(out, "{t},median_ratio,state,{}", trace.median_ratio[k]);
        let _ = writeln!(out, "{t},iqr_lo,state,{}", trace.iqr_lo[k]);
        let _ = writeln!(out, "{t},iqr_hi,state,{}", trace.iqr_hi[k]);
    }
    out
}

/// Leading-2 PCA projection of each rollout's error trajectory.
pub fn perturbation_pca_csv(trace: &PerturbationTrace) -> String {
    let mut out = String::from("rollout,t,x,y\n");
    for k in 0..trace.horizon {
        let t = trace.t0 + k;
        for (i, (x, y)) in trace.pca[k].iter().enumerate() {
            let _ = writeln!(out, "{i},{t},{x},{y}");
        }
    }
    out
}

pub fn gain_csv(report: &GainReport) -> String {
    let mut out = String::from("word,length,gain\n");
    for g in &report.gains {
        let word: Vec<String> = g.word.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "{},{},{}", word.join("-"), g.word.len(), g.gain);
    }
    out
}

pub fn epochs_csv(record: &RunRecord) -> String {
    let mut out = String::from("epoch,stage_len,train_loss,test_acc,lr,clipped\n");
    for e in &record.epoch_log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.epoch,
            e.stage_len,
            e.train_loss,
            e.test_acc,
            e.lr,
            if e.clipped { 1 } else { 0 }
        );
    }
    out
}

pub fn evals_csv(record: &RunRecord) -> String {
    let mut out = String::from("length,token_acc,final_acc\n");
    for e in &record.eval {
        let _ = writeln!(out, "{},{},{}", e.length, e.token_acc, e.final_acc);
    }
    out
}

pub fn crossing_csv(report: &CrossingReport) -> String {
    let mut out = String::from("label,t_cross,mp,q_at_mp\n");
    for m in &report.per_model {
        let tc = m.t_cross.map(|t| t.to_string()).unwrap_or_else(|| "inf".into());
        let _ = writeln!(out, "{},{tc},{},{}", m.label, m.mp, fmt_opt(m.q_at_mp));
    }
    out
}

pub fn grid_summary_csv(records: &[RunRecord]) -> String {
    let mut out =
        String::from("cell,model,group,d_state,lr,scheduler,seed,mp,final_test_acc,converged,failed\n");
    for (i, r) in records.iter().enumerate() {
        let sched = serde_json::to_string(&r.train_config.scheduler).unwrap_or_default();
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{},{},{}",
            r.model_name,
            r.group,
            r.stack_config.d_state,
            r.train_config.lr,
            sched.trim_matches('"'),
            r.seed,
            r.mp,
            r.final_test_acc,
            if r.converged { 1 } else { 0 },
            if r.failed { 1 } else { 0 }
        );
    }
    out
}

/// Parse a tidy trace CSV back into (t, quantity, space) → value rows.
pub fn parse_tidy_csv(text: &str) -> Result<Vec<(usize, String, String, Option<f64>)>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::config(format!("bad tidy CSV row at line {}", ln + 1)));
        }
        let t: usize = parts[0]
            .parse()
            .map_err(|_| Error::config(format!("bad step index at line {}", ln + 1)))?;
        let value = if parts[3].is_empty() {
            None
        } else {
            Some(parts[3].parse::<f64>().map_err(|_| {
                Error::config(format!("bad value at line {}", ln + 1))
            })?)
        };
        rows.push((t, parts[1].to_string(), parts[2].to_string(), value));
    }
    Ok(rows)
}

/// Extract the readout-space q(t) series from a tidy separation CSV.
pub fn q_series_from_csv(text: &str) -> Result<Vec<Option<f64>>> {
    let rows = parse_tidy_csv(text)?;
    let mut t_max = 0;
    for (t, q, space, _) in &rows {
        if q == "q" && space == "readout" {
            t_max = t_max.max(*t);
        }
    }
    let mut series = vec![None; t_max];
    for (t, q, space, v) in rows {
        if q == "q" && space == "readout" {
            series[t - 1] = v;
        }
    }
    Ok(series)
}
