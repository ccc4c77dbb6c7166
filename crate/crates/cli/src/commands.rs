use std::fs;
use std::path::Path;

use fedspa_core::evaluation::{
    audit_model, audit_reports, evaluate, random_baseline, standalone_vs_federated, unbiasedness_test, HeldoutSet,
};
use fedspa_core::orchestrator::PrunedModel;

use crate::output::{self, CompareRow, EvalRow};
use crate::{federation, load, CliError, Options};

fn achieved_sparsity(model: &PrunedModel) -> f64 {
    match &model.masks {
        None => 0.0,
        Some(masks) => {
            let zeros: usize = masks.iter().map(|m| m.zero_count()).sum();
            let total: usize = masks.iter().map(|m| m.len()).sum();
            zeros as f64 / total as f64
        }
    }
}

/// Runs the configured experiment and writes `rounds.jsonl`, `eval.csv` and
/// `final.fspa` into the output directory, which is returned.
pub fn cmd_run(config: &Path, opts: &Options) -> Result<std::path::PathBuf, CliError> {
    let loaded = load(config, opts)?;
    let exp = &loaded.experiment;
    let cfg = &exp.federation;

    let mut fed = federation(exp)?;
    let outcome = fed.run_experiment()?;
    let heldout = HeldoutSet::sample(&exp.dense, &cfg.data, exp.eval.heldout_samples, exp.eval.seed)?;
    let dense = PrunedModel::dense(exp.dense.clone());
    let random = random_baseline(&exp.dense, cfg.sparsity, exp.eval.seed)?;

    let mut rows = Vec::with_capacity(3);
    for (name, model) in [("dense", &dense), ("federated", &outcome.final_model), ("random", &random)] {
        let report = evaluate(model, &exp.dense, &heldout)?;
        rows.push(EvalRow {
            model: name,
            target_sparsity: if model.masks.is_some() { cfg.sparsity.value() } else { 0.0 },
            achieved_sparsity: achieved_sparsity(model),
            loss: report.loss,
            perplexity_proxy: report.perplexity_proxy,
            recon_error: report.layer_recon_errors.iter().sum(),
        });
    }

    fs::create_dir_all(&loaded.out_dir)?;
    output::write_rounds(&loaded.out_dir.join(output::ROUNDS_FILE), &outcome.reports)?;
    output::write_csv(&loaded.out_dir.join(output::EVAL_FILE), &rows)?;
    output::write_checkpoint(&loaded.out_dir.join(output::CHECKPOINT_FILE), &outcome.final_model)?;

    let bytes_down: u64 = outcome.reports.iter().map(|r| r.bytes_down).sum();
    let bytes_full: u64 = outcome.reports.iter().map(|r| r.bytes_down_full_model).sum();
    println!(
        "{} rounds, {} clients, target sparsity {}: federated loss {:.6e}, random loss {:.6e}, downlink {:.1}% of full model",
        cfg.rounds,
        cfg.n_clients(),
        cfg.sparsity.value(),
        rows[1].loss,
        rows[2].loss,
        100.0 * bytes_down as f64 / bytes_full as f64
    );
    println!("wrote {}", loaded.out_dir.display());
    Ok(loaded.out_dir)
}

/// Standalone vs federated vs random over the eval sparsity grid; writes
/// `compare.csv` with one row per (sparsity, method).
pub fn cmd_compare(config: &Path, opts: &Options) -> Result<std::path::PathBuf, CliError> {
    let loaded = load(config, opts)?;
    let exp = &loaded.experiment;
    if !exp.has_eval_block {
        return Err(CliError::Config("eval: compare needs an [eval] block with a sparsity_grid".into()));
    }
    let cfg = &exp.federation;
    let heldout = HeldoutSet::sample(&exp.dense, &cfg.data, exp.eval.heldout_samples, exp.eval.seed)?;
    let table = standalone_vs_federated(&exp.dense, cfg, &heldout, &exp.sparsity_grid)?;

    let mut rows = Vec::with_capacity(3 * table.len());
    for r in &table {
        for (method, loss) in [
            ("standalone", r.standalone_mean_loss),
            ("federated", r.federated_loss),
            ("random", r.random_loss),
        ] {
            rows.push(CompareRow {
                dataset: exp.data_name.clone(),
                sparsity: r.sparsity,
                method,
                loss,
                perplexity_proxy: loss.exp(),
            });
        }
        println!(
            "s={:.2}: standalone {:.6e}  federated {:.6e}  random {:.6e}",
            r.sparsity, r.standalone_mean_loss, r.federated_loss, r.random_loss
        );
    }
    fs::create_dir_all(&loaded.out_dir)?;
    output::write_csv(&loaded.out_dir.join(output::COMPARE_FILE), &rows)?;
    println!("wrote {}", loaded.out_dir.join(output::COMPARE_FILE).display());
    Ok(loaded.out_dir)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    /// One `PASS …` / `FAIL …` line per property.
    pub lines: Vec<String>,
    pub passed: bool,
}

/// Sparsity audit of every round and the final model, then the Monte Carlo
/// unbiasedness test. Needs equal client capacities.
pub fn cmd_verify(config: &Path, opts: &Options) -> Result<VerifyOutcome, CliError> {
    let loaded = load(config, opts)?;
    let exp = &loaded.experiment;
    let cfg = &exp.federation;
    let caps: Vec<f64> = cfg.resources.iter().map(|r| r.capacity).collect();
    if caps.iter().any(|&c| c != caps[0]) {
        return Err(CliError::Config(format!(
            "federation.resources: verify needs equal capacities so every layer is sampled with equal probability, got {caps:?}"
        )));
    }
    if exp.eval.trials < 2 {
        return Err(CliError::Config("eval.trials: verify needs at least 2 trials".into()));
    }

    let mut fed = federation(exp)?;
    let outcome = fed.run_experiment()?;
    let mut audit = audit_reports(&outcome.reports);
    let final_audit = audit_model(&outcome.final_model, cfg.sparsity);
    audit.layers_checked += final_audit.layers_checked;
    audit.failures.extend(final_audit.failures);
    let sparsity_line = format!(
        "{} sparsity-audit: {} layer checks at s={}, {} mismatched{}",
        if audit.passed() { "PASS" } else { "FAIL" },
        audit.layers_checked,
        cfg.sparsity.value(),
        audit.failures.len(),
        audit
            .failures
            .first()
            .map(|f| format!(" (first: layer {} has {} zeros, expected {})", f.layer_index, f.zeros, f.expected_zeros))
            .unwrap_or_default()
    );

    let report = unbiasedness_test(&exp.dense, cfg, exp.eval.trials, exp.eval.seed)?;
    let unbiased_line = format!(
        "{} unbiasedness: {} trials, budgets {:?}; aggregated max|dev| {:.3e} (max z {:.2}), sampling estimator max|dev| {:.3e} (max z {:.2}, {:.1}% within 4 SE)",
        if report.passed { "PASS" } else { "FAIL" },
        report.trials,
        report.layer_budget,
        report.aggregated.max_abs_deviation,
        report.aggregated.max_z,
        report.sampled.max_abs_deviation,
        report.sampled.max_z,
        100.0 * report.sampled.within_4se_fraction
    );

    let lines = vec![sparsity_line, unbiased_line];
    for l in &lines {
        println!("{l}");
    }
    let passed = audit.passed() && report.passed;
    let outcome = VerifyOutcome { lines, passed };
    if !outcome.passed {
        let failed = outcome
            .lines
            .iter()
            .filter(|l| l.starts_with("FAIL"))
            .filter_map(|l| l.split(':').next().map(|s| s.trim_start_matches("FAIL ").to_string()))
            .collect();
        return Err(CliError::VerifyFailed(failed));
    }
    Ok(outcome)
}
