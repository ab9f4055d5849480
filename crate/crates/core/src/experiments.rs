//! Experiment drivers built on the trainer: side-by-side optimizer
//! comparison, penalty-strength sweeps with cross-language transfer scoring,
//! and adapter spectrum reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::spectral::{high_freq_fraction, power_spectrum, PenaltyWeights};
use crate::tasks::{build_dataset, LanguageId};
use crate::tensor::matmul;
use crate::train::{evaluate, train, OptimizerKind, TrainConfig, TrainOutcome};

// ---------------------------------------------------------------------------
// Optimizer comparison
// ---------------------------------------------------------------------------

/// Per-optimizer summary of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct OptRunSummary {
    pub optimizer: String,
    pub initial_task_loss: f64,
    pub final_task_loss: f64,
    /// First step whose batch task loss fell below half the initial loss.
    pub steps_to_half_loss: Option<u64>,
    pub mean_grad_norm: f64,
    pub final_grad_norm: f64,
    /// Held-out loss after training.
    pub final_val_loss: f64,
    pub test_pass_at_1: f64,
    /// Total training wall time (sum of per-step timings).
    pub wall_time_ms: f64,
    /// Per-step gradient norms, one entry per optimizer step.
    pub grad_norms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptComparison {
    pub steps: u64,
    /// Both runs consumed bitwise-identical batches in the same order.
    pub batches_identical: bool,
    pub adamw: OptRunSummary,
    pub sophia: OptRunSummary,
}

fn summarize(outcome: &TrainOutcome) -> Result<OptRunSummary> {
    let half = 0.5 * outcome.initial_task_loss;
    let steps_to_half_loss = outcome
        .metrics
        .iter()
        .find(|m| m.task_loss < half)
        .map(|m| m.step);
    let n = outcome.metrics.len().max(1) as f64;
    let mean_grad_norm = outcome.metrics.iter().map(|m| m.grad_norm).sum::<f64>() / n;
    let eval = evaluate(
        &outcome.model,
        &outcome.adapters,
        &outcome.dataset.test,
        false,
        outcome.config.eval_max_new,
    )?;
    Ok(OptRunSummary {
        optimizer: outcome.config.optimizer.name().to_string(),
        initial_task_loss: outcome.initial_task_loss,
        final_task_loss: outcome.final_task_loss(),
        steps_to_half_loss,
        mean_grad_norm,
        final_grad_norm: outcome.metrics.last().map(|m| m.grad_norm).unwrap_or(0.0),
        final_val_loss: eval.avg_task_loss,
        test_pass_at_1: eval.pass_at_1,
        wall_time_ms: outcome.metrics.iter().map(|m| m.wall_ms).sum(),
        grad_norms: outcome.metrics.iter().map(|m| m.grad_norm).collect(),
    })
}

/// Train twice from the same seed, once per optimizer, on identical batch
/// streams, and summarize both trajectories.
pub fn compare_optimizers(config: &TrainConfig) -> Result<OptComparison> {
    let mut cfg_adamw = config.clone();
    cfg_adamw.optimizer = OptimizerKind::Adamw;
    let mut cfg_sophia = config.clone();
    cfg_sophia.optimizer = OptimizerKind::Sophia;

    let run_adamw = train(&cfg_adamw)?;
    let run_sophia = train(&cfg_sophia)?;
    let batches_identical = run_adamw.batch_hashes == run_sophia.batch_hashes;

    Ok(OptComparison {
        steps: run_adamw.metrics.len() as u64,
        batches_identical,
        adamw: summarize(&run_adamw)?,
        sophia: summarize(&run_sophia)?,
    })
}

impl OptComparison {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[comparison]");
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "batches_identical = {}", self.batches_identical);
        for run in [&self.adamw, &self.sophia] {
            let _ = writeln!(out, "\n[{}]", run.optimizer);
            let body = toml::to_string_pretty(run).expect("summary serializes");
            out.push_str(&body);
            // TOML drops `None` fields; keep the column visible either way.
            if run.steps_to_half_loss.is_none() {
                let _ = writeln!(out, "steps_to_half_loss = \"not reached\"");
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Penalty-strength sweep
// ---------------------------------------------------------------------------

/// Outcome of one sweep arm (one lambda value).
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub initial_task_loss: f64,
    pub final_task_loss: f64,
    /// Held-out accuracy in the training language.
    pub in_language_pass_at_1: f64,
    /// Held-out accuracy on the same programs rendered in the other language.
    pub transfer_pass_at_1: f64,
    /// Mean high-frequency power share over the trained factors.
    pub hf_fraction_factors: f64,
    /// Mean high-frequency power share over the effective deltas s*B*A.
    pub hf_fraction_delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub language: String,
    pub transfer_language: String,
    pub rows: Vec<SweepRow>,
}

fn other_language(lang: LanguageId) -> LanguageId {
    match lang {
        LanguageId::A => LanguageId::B,
        LanguageId::B => LanguageId::A,
    }
}

/// Mean high-frequency fraction over all adapter factors (B and A flattened).
pub fn adapters_hf_fraction_factors(set: &LoraSet, threshold: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for adapter in set.adapters.values() {
        total += high_freq_fraction(adapter.b.data(), threshold)?;
        total += high_freq_fraction(adapter.a.data(), threshold)?;
        count += 2;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty adapter set".into()));
    }
    Ok(total / count as f64)
}

/// Mean high-frequency fraction over the effective deltas s*B*A.
pub fn adapters_hf_fraction_delta(set: &LoraSet, threshold: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for adapter in set.adapters.values() {
        let mut delta = matmul(&adapter.b, &adapter.a)?;
        delta.scale(adapter.effective_scale());
        total += high_freq_fraction(delta.data(), threshold)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("empty adapter set".into()));
    }
    Ok(total / count as f64)
}

/// Train one arm per lambda value and score in-language plus cross-language
/// generalization. The transfer split renders the same held-out programs in
/// the other surface language.
pub fn sweep_lambda(config: &TrainConfig, lambdas: &[f64]) -> Result<SweepReport> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one lambda".into()));
    }
    let lang = config.language_id()?;
    let transfer_lang = other_language(lang);
    let transfer_data = build_dataset(
        config.seed,
        config.n_programs,
        config.max_ops,
        transfer_lang,
    )?;

    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = config.clone();
        cfg.fourier.lambda = lambda;
        let outcome = train(&cfg)?;
        let in_language = evaluate(
            &outcome.model,
            &outcome.adapters,
            &outcome.dataset.test,
            false,
            cfg.eval_max_new,
        )?;
        let transfer = evaluate(
            &outcome.model,
            &outcome.adapters,
            &transfer_data.test,
            false,
            cfg.eval_max_new,
        )?;
        rows.push(SweepRow {
            lambda,
            initial_task_loss: outcome.initial_task_loss,
            final_task_loss: outcome.final_task_loss(),
            in_language_pass_at_1: in_language.pass_at_1,
            transfer_pass_at_1: transfer.pass_at_1,
            hf_fraction_factors: adapters_hf_fraction_factors(
                &outcome.adapters,
                cfg.fourier.threshold,
            )?,
            hf_fraction_delta: adapters_hf_fraction_delta(
                &outcome.adapters,
                cfg.fourier.threshold,
            )?,
        });
    }
    Ok(SweepReport {
        language: lang.name().to_string(),
        transfer_language: transfer_lang.name().to_string(),
        rows,
    })
}

impl SweepReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[sweep]");
        let _ = writeln!(out, "language = \"{}\"", self.language);
        let _ = writeln!(out, "transfer_language = \"{}\"", self.transfer_language);
        for row in &self.rows {
            let _ = writeln!(out, "\n[[arm]]");
            let body = toml::to_string_pretty(row).expect("row serializes");
            out.push_str(&body);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Spectrum report
// ---------------------------------------------------------------------------

/// Per-target spectrum summary.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumEntry {
    pub target: String,
    /// The adapter has not been trained yet: B is all zero so the delta
    /// carries no signal and no spectrum file is written for it.
    pub untrained: bool,
    pub hf_fraction: Option<f64>,
    pub bins: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub threshold: f64,
    pub entries: Vec<SpectrumEntry>,
}

/// Write one `spectrum_<target>.csv` (columns k,power,rho) per trained
/// adapter, computed over the flattened effective delta s*B*A, and return
/// the summary. Adapters whose B factor is still all zero are flagged
/// untrained and skipped.
pub fn spectrum_report(
    set: &LoraSet,
    fourier: &crate::spectral::FourierRegConfig,
    out_dir: &Path,
) -> Result<SpectrumReport> {
    if set.adapters.is_empty() {
        return Err(Error::InvalidArgument("spectrum_report: empty adapter set".into()));
    }
    fourier.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for (target, adapter) in &set.adapters {
        let mut delta = matmul(&adapter.b, &adapter.a)?;
        delta.scale(adapter.effective_scale());
        if delta.data().iter().all(|&v| v == 0.0) {
            entries.push(SpectrumEntry {
                target: target.clone(),
                untrained: true,
                hf_fraction: None,
                bins: 0,
            });
            continue;
        }
        let power = power_spectrum(delta.data())?;
        let weights = PenaltyWeights::new(delta.len(), fourier)?;
        let mut csv = String::from("k,power,rho\n");
        for (k, (&p, &r)) in power.iter().zip(&weights.rho).enumerate() {
            let _ = writeln!(csv, "{k},{p:.17e},{r:.17e}");
        }
        fs::write(out_dir.join(format!("spectrum_{target}.csv")), csv)?;
        entries.push(SpectrumEntry {
            target: target.clone(),
            untrained: false,
            hf_fraction: Some(high_freq_fraction(delta.data(), fourier.threshold)?),
            bins: power.len(),
        });
    }
    Ok(SpectrumReport {
        threshold: fourier.threshold,
        entries,
    })
}

impl SpectrumReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[spectrum]");
        let _ = writeln!(out, "threshold = {}", self.threshold);
        for e in &self.entries {
            let _ = writeln!(out, "\n[[target]]");
            let body = toml::to_string_pretty(e).expect("entry serializes");
            out.push_str(&body);
        }
        out
    }
}
