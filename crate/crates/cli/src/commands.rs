use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde_json::json;
use trainmap_core::agreement::{
    accuracy, group_by_checkpoint, group_by_run, inter_seed_agreement, kappa_between, preference_proportion,
    self_consistency, AgreementResult, PredictionLog,
};
use trainmap_core::cartography::{
    canonicalize_model, decode_maps, read_maps_csv, standardize, transition_drivers, transition_step_summary,
    write_drivers_csv, write_maps_csv, StandardizationMode, StandardizedEnsemble, TrainingMap,
};
use trainmap_core::hmm::{bic_score, fit_named, select_num_states, FitConfig, HmmModel};
use trainmap_core::paramstats::{mean, population_variance, run_statistics, write_stats_csv, StatConfig, StatSeries};
use trainmap_core::probe::{
    codelength_ratio, read_representation_dump, subspace_angles, train, trajectory_correlations,
    write_representation_dump, Prior, ProbeModel, TrainConfig,
};
use trainmap_core::stability::{
    average_z_for, bag_of_states, flag_outliers, map_performance_regression, truncation_curve, write_accuracy_csv,
    zero_shot_decode, zscore, OutlierRule,
};
use trainmap_core::synthlab::{
    accuracy_table_from_scores, default_tensor_specs, generate_checkpoints, generate_drifting_logs,
    generate_prediction_logs, generate_probe_task, generate_stat_series, write_truth_csv, Anomaly, RegimeScript,
    SynthLogConfig, SynthTaskConfig,
};
use trainmap_core::tensorstore::load_manifest;

use crate::args::*;
use crate::provenance::record;
use crate::report::{line_panels, map_strips, summarize, Line, Panel};
use crate::tables::*;
use crate::{CliError, CliResult};

pub fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Stats(a) => stats(a),
        Command::HmmFit(a) => hmm_fit(a),
        Command::HmmSelect(a) => hmm_select(a),
        Command::Map(a) => map(a),
        Command::Drivers(a) => drivers(a),
        Command::Transitions(a) => transitions(a),
        Command::Predict(a) => predict(a),
        Command::ZeroShot(a) => zero_shot(a),
        Command::Truncate(a) => truncate(a),
        Command::Kappa(a) => kappa(a),
        Command::SelfConsistency(a) => self_consistency_cmd(a),
        Command::Accuracy(a) => accuracy_cmd(a),
        Command::Outliers(a) => outliers(a),
        Command::Bias(a) => bias(a),
        Command::ProbeTrain(a) => probe_train(a),
        Command::Ssa(a) => ssa(a),
        Command::Correlate(a) => correlate(a),
        Command::Synth(a) => synth(a),
        Command::Report(a) => report(a),
    }
}

fn mode(a: &StandardizeArgs) -> StandardizationMode {
    match a.mode {
        ModeArg::PerCheckpoint => StandardizationMode::PerCheckpoint,
        ModeArg::Pooled => StandardizationMode::Pooled,
    }
}

fn fit_config(a: &FitArgs) -> FitConfig {
    FitConfig {
        restarts: a.restarts,
        max_iterations: a.max_iterations,
        tolerance: a.tolerance,
        variance_floor: a.variance_floor,
        seed: a.seed,
    }
}

fn standardized(stats: &Path, size: Option<&str>, opts: &StandardizeArgs, max_step: Option<u64>) -> CliResult<StandardizedEnsemble> {
    let (_, mut series) = load_series(stats, size)?;
    if let Some(t) = max_step {
        for s in &mut series {
            s.vectors.retain(|v| v.step <= t);
        }
        if series.iter().any(|s| s.vectors.is_empty()) {
            return Err(CliError::Data(format!("no checkpoints at or before step {t}")));
        }
    }
    Ok(standardize(&series, mode(opts), opts.epsilon)?)
}

fn load_model(path: &Path) -> CliResult<HmmModel> {
    Ok(HmmModel::from_json(&read_text(path)?)?)
}

fn load_maps(path: &Path) -> CliResult<Vec<TrainingMap>> {
    Ok(read_maps_csv(&read_text(path)?)?)
}

fn maps_by_size(maps: Vec<TrainingMap>) -> BTreeMap<String, Vec<TrainingMap>> {
    let mut out: BTreeMap<String, Vec<TrainingMap>> = BTreeMap::new();
    for m in maps {
        out.entry(m.size.clone()).or_default().push(m);
    }
    out
}

fn write_out(path: &Path, text: &str) -> CliResult {
    write_text(path, text)
}

fn stats(a: &StatsArgs) -> CliResult {
    let cfg = StatConfig { include: a.include.clone(), exclude: a.exclude.clone(), ..Default::default() };
    let mut seen = BTreeSet::new();
    let mut all: Vec<StatSeries> = Vec::new();
    for path in &a.manifests {
        if !path.exists() {
            return Err(CliError::Usage(format!("manifest {} does not exist", path.display())));
        }
        let manifest = load_manifest(path)?;
        if !seen.insert((manifest.size.clone(), manifest.seed)) {
            return Err(CliError::Data(format!("run {}/{} appears twice", manifest.size, manifest.seed)));
        }
        all.push(run_statistics(&manifest, &cfg)?);
    }
    let mut buf = Vec::new();
    write_stats_csv(&all, &mut buf)?;
    write_out(&a.output, &String::from_utf8_lossy(&buf))?;
    record("stats", &a.manifests, std::slice::from_ref(&a.output), &a.output)
}

fn hmm_fit(a: &HmmFitArgs) -> CliResult {
    let ens = standardized(&a.stats, a.size.as_deref(), &a.standardize, a.max_step)?;
    let seqs = ens.sequences();
    let (model, report) = fit_named(&seqs, &ens.feature_names, a.states, &fit_config(&a.fit))?;
    let model = canonicalize_model(&model, &ens)?;
    let degenerate = ens.scaler.degenerate_features();
    if !degenerate.is_empty() {
        log::warn!("features constant across the ensemble: {}", degenerate.join(", "));
    }
    write_out(&a.output, &model.to_json()?)?;
    let fit_path = sibling(&a.output, ".fit.json");
    let summary = json!({
        "states": a.states,
        "runs": ens.runs.len(),
        "observations": seqs.iter().map(Vec::len).sum::<usize>(),
        "log_likelihood": report.final_log_likelihood(),
        "bic": bic_score(&model, &seqs)?,
        "chosen_restart": report.chosen_restart,
        "restart_log_likelihoods": report.restart_log_likelihoods,
        "converged": report.converged,
        "trace": report.trace,
        "degenerate_features": degenerate,
    });
    write_out(&fit_path, &serde_json::to_string_pretty(&summary)?)?;
    record("hmm-fit", std::slice::from_ref(&a.stats), &[a.output.clone(), fit_path], &a.output)
}

fn hmm_select(a: &HmmSelectArgs) -> CliResult {
    if a.min_states == 0 || a.min_states > a.max_states {
        return Err(CliError::Usage("need 1 <= --min-states <= --max-states".into()));
    }
    let ens = standardized(&a.stats, a.size.as_deref(), &a.standardize, None)?;
    let range: Vec<usize> = (a.min_states..=a.max_states).collect();
    let (best, table) = select_num_states(&ens.sequences(), &range, &fit_config(&a.fit))?;
    let text = csv_text(
        &["k", "log_likelihood", "bic", "chosen"],
        table.iter().map(|r| vec![r.k.to_string(), fmt(r.log_likelihood), fmt(r.bic), (r.k == best).to_string()]),
    )?;
    write_out(&a.output, &text)?;
    println!("{best}");
    record("hmm-select", std::slice::from_ref(&a.stats), std::slice::from_ref(&a.output), &a.output)
}

fn check_features(model: &HmmModel, ens: &StandardizedEnsemble) -> CliResult {
    if model.feature_names != ens.feature_names {
        return Err(CliError::Data(format!(
            "model features [{}] differ from data features [{}]",
            model.feature_names.join(","),
            ens.feature_names.join(",")
        )));
    }
    Ok(())
}

fn map(a: &MapArgs) -> CliResult {
    let ens = standardized(&a.stats, a.size.as_deref(), &a.standardize, None)?;
    let model = load_model(&a.model)?;
    check_features(&model, &ens)?;
    let maps = decode_maps(&model, &ens)?;
    let mut buf = Vec::new();
    write_maps_csv(&maps, &mut buf)?;
    write_out(&a.output, &String::from_utf8_lossy(&buf))?;
    record("map", &[a.stats.clone(), a.model.clone()], std::slice::from_ref(&a.output), &a.output)
}

fn drivers(a: &DriversArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let d = transition_drivers(&model, (a.from, a.to), a.top)?;
    let mut buf = Vec::new();
    write_drivers_csv(&d, &mut buf)?;
    write_out(&a.output, &String::from_utf8_lossy(&buf))?;
    record("drivers", std::slice::from_ref(&a.model), std::slice::from_ref(&a.output), &a.output)
}

fn transitions(a: &TransitionsArgs) -> CliResult {
    let by_size = maps_by_size(load_maps(&a.maps)?);
    let mut header = vec!["size".to_string(), "group".to_string(), "runs".to_string()];
    for s in 0..a.states.saturating_sub(1) {
        header.extend([format!("mean_{s}_{}", s + 1), format!("std_{s}_{}", s + 1), format!("missing_{s}_{}", s + 1)]);
    }
    let mut rows = Vec::new();
    for (size, maps) in &by_size {
        let forked: BTreeSet<u64> = maps.iter().filter(|m| m.has_fork()).map(|m| m.seed).collect();
        let all: BTreeSet<u64> = maps.iter().map(|m| m.seed).collect();
        let groups = [
            ("all", BTreeSet::new()),
            ("no_fork", forked.clone()),
            ("fork", all.difference(&forked).copied().collect::<BTreeSet<u64>>()),
        ];
        for (name, exclude) in groups {
            let n = all.len() - exclude.len();
            if n == 0 {
                continue;
            }
            let mut row = vec![size.clone(), name.to_string(), n.to_string()];
            for t in transition_step_summary(maps, &exclude, a.states) {
                row.push(t.mean_step.map(fmt).unwrap_or_default());
                row.push(t.std_step.map(fmt).unwrap_or_default());
                row.push(t.missing.len().to_string());
            }
            rows.push(row);
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_out(&a.output, &csv_text(&header, rows)?)?;
    record("transitions", std::slice::from_ref(&a.maps), std::slice::from_ref(&a.output), &a.output)
}

fn predict(a: &PredictArgs) -> CliResult {
    let by_size = maps_by_size(load_maps(&a.maps)?);
    let z = zscore(&read_final_accuracy(&a.accuracy)?)?;
    let mut header = vec!["size".to_string(), "seed".into(), "z".into(), "fitted".into(), "residual".into()];
    header.extend((0..a.states).map(|s| format!("count_{s}")));
    let mut summary_header = vec!["size".to_string(), "r2".into(), "intercept".into()];
    summary_header.extend((0..a.states).map(|s| format!("coef_{s}")));
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (size, maps) in &by_size {
        let seeds: Vec<u64> = maps.iter().map(|m| m.seed).collect();
        let zs = average_z_for(&z, size, &seeds)?;
        let bags = maps.iter().map(|m| bag_of_states(m, a.states)).collect::<trainmap_core::Result<Vec<_>>>()?;
        let fit = map_performance_regression(&bags, &zs)?;
        for (i, bag) in bags.iter().enumerate() {
            let mut row = vec![size.clone(), bag.seed.to_string(), fmt(zs[i]), fmt(fit.fitted[i]), fmt(fit.residuals[i])];
            row.extend(bag.counts.iter().map(|c| c.to_string()));
            rows.push(row);
        }
        let mut s = vec![size.clone(), fmt(fit.r_squared), fmt(fit.intercept.unwrap_or(0.0))];
        s.extend(fit.coefficients.iter().map(|&c| fmt(c)));
        summary.push(s);
    }
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_out(&a.output, &csv_text(&h, rows)?)?;
    let summary_path = sibling(&a.output, ".summary.csv");
    let h: Vec<&str> = summary_header.iter().map(String::as_str).collect();
    write_out(&summary_path, &csv_text(&h, summary)?)?;
    record("predict", &[a.maps.clone(), a.accuracy.clone()], &[a.output.clone(), summary_path], &a.output)
}

fn zero_shot(a: &ZeroShotArgs) -> CliResult {
    let ens = standardized(&a.stats, a.size.as_deref(), &a.standardize, None)?;
    let model = load_model(&a.model)?;
    let maps = zero_shot_decode(&model, &ens)?;
    let mut buf = Vec::new();
    write_maps_csv(&maps, &mut buf)?;
    write_out(&a.output, &String::from_utf8_lossy(&buf))?;
    record("zero-shot", &[a.model.clone(), a.stats.clone()], std::slice::from_ref(&a.output), &a.output)
}

fn truncate(a: &TruncateArgs) -> CliResult {
    let by_size = maps_by_size(load_maps(&a.maps)?);
    let z = zscore(&read_final_accuracy(&a.accuracy)?)?;
    let mut rows = Vec::new();
    for (size, maps) in &by_size {
        let steps: Vec<u64> = if a.steps.is_empty() {
            maps.iter().flat_map(|m| m.steps.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect()
        } else {
            a.steps.clone()
        };
        let seeds: Vec<u64> = maps.iter().map(|m| m.seed).collect();
        let zs = average_z_for(&z, size, &seeds)?;
        for (step, r2) in truncation_curve(maps, &zs, a.states, &steps)? {
            rows.push(vec![size.clone(), step.to_string(), fmt(r2)]);
        }
    }
    write_out(&a.output, &csv_text(&["size", "step", "r2"], rows)?)?;
    record("truncate", &[a.maps.clone(), a.accuracy.clone()], std::slice::from_ref(&a.output), &a.output)
}

fn read_logs(paths: &[PathBuf]) -> CliResult<Vec<PredictionLog>> {
    paths
        .iter()
        .map(|p| {
            let f = std::fs::File::open(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            PredictionLog::read_jsonl(BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        })
        .collect()
}

const AGREEMENT_HEADER: [&str; 8] = ["task", "size", "seed", "step", "observed", "expected", "items", "kappa"];

fn agreement_row(task: &str, size: &str, seed: u64, step: u64, r: &AgreementResult) -> Vec<String> {
    vec![
        task.to_string(),
        size.to_string(),
        seed.to_string(),
        step.to_string(),
        fmt(r.observed),
        fmt(r.expected),
        r.items.to_string(),
        fmt(r.kappa),
    ]
}

fn kappa(a: &KappaArgs) -> CliResult {
    let logs = read_logs(&a.logs.logs)?;
    let mut rows = Vec::new();
    for ((task, size, step), group) in group_by_checkpoint(logs) {
        for (seed, r) in inter_seed_agreement(&group, a.reference_seed)? {
            rows.push(agreement_row(&task, &size, seed, step, &r));
        }
    }
    write_out(&a.logs.output, &csv_text(&AGREEMENT_HEADER, rows)?)?;
    record("kappa", &a.logs.logs, std::slice::from_ref(&a.logs.output), &a.logs.output)
}

fn self_consistency_cmd(a: &LogsArgs) -> CliResult {
    let logs = read_logs(&a.logs)?;
    let mut rows = Vec::new();
    for ((task, size, seed), group) in group_by_run(logs) {
        for (step, r) in self_consistency(&group)? {
            rows.push(agreement_row(&task, &size, seed, step, &r));
        }
    }
    write_out(&a.output, &csv_text(&AGREEMENT_HEADER, rows)?)?;
    record("self-consistency", &a.logs, std::slice::from_ref(&a.output), &a.output)
}

fn accuracy_cmd(a: &LogsArgs) -> CliResult {
    let logs = read_logs(&a.logs)?;
    let mut rows = Vec::new();
    for l in &logs {
        let h = &l.header;
        rows.push(vec![h.task.clone(), h.size.clone(), h.seed.to_string(), h.step.to_string(), fmt(accuracy(l)?)]);
    }
    rows.sort();
    write_out(&a.output, &csv_text(&["task", "size", "seed", "step", "accuracy"], rows)?)?;
    record("accuracy", &a.logs, std::slice::from_ref(&a.output), &a.output)
}

fn outliers(a: &OutliersArgs) -> CliResult {
    let z = zscore(&read_final_accuracy(&a.accuracy)?)?;
    let rule = match a.rule {
        RuleArg::AnyTask => OutlierRule::AnyTask,
        RuleArg::Majority => OutlierRule::Majority,
    };
    let flagged = flag_outliers(&z, a.threshold, rule);
    let rows = flagged.iter().map(|o| {
        let avg = z
            .size(&o.size)
            .and_then(|s| s.seeds.iter().position(|&x| x == o.seed).map(|i| s.average[i]))
            .unwrap_or(f64::NAN);
        vec![o.size.clone(), o.seed.to_string(), fmt(avg), o.tasks.join(";")]
    });
    write_out(&a.output, &csv_text(&["size", "seed", "average_z", "tasks"], rows)?)?;
    record("outliers", std::slice::from_ref(&a.accuracy), std::slice::from_ref(&a.output), &a.output)
}

fn bias(a: &BiasArgs) -> CliResult {
    let mut groups: BTreeMap<(String, String, u64, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in read_pairs(&a.pairs)? {
        groups.entry((r.task, r.size, r.seed, r.step)).or_default().push((r.stereotypical, r.anti_stereotypical));
    }
    let mut rows = Vec::new();
    for ((task, size, seed, step), pairs) in groups {
        rows.push(vec![task, size, seed.to_string(), step.to_string(), pairs.len().to_string(), fmt(preference_proportion(&pairs)?)]);
    }
    write_out(&a.output, &csv_text(&["task", "size", "seed", "step", "pairs", "proportion"], rows)?)?;
    record("bias", std::slice::from_ref(&a.pairs), std::slice::from_ref(&a.output), &a.output)
}

fn probe_train(a: &ProbeTrainArgs) -> CliResult {
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        seed: a.seed,
        prior: match a.prior {
            PriorArg::LogUniform => Prior::LogUniform,
            PriorArg::StandardNormal => Prior::StandardNormal,
        },
        heldout_fraction: a.heldout,
    };
    if !a.dump.exists() {
        return Err(CliError::Usage(format!("dump {} does not exist", a.dump.display())));
    }
    let (data, header) = read_representation_dump(&a.dump)?;
    let baseline = match &a.baseline {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Usage(format!("baseline {} does not exist", p.display())));
            }
            Some(read_representation_dump(p)?.0)
        }
        None => None,
    };
    let jobs: Vec<&trainmap_core::ProbeDataset> = std::iter::once(&data).chain(baseline.as_ref()).collect();
    let mut results = jobs.par_iter().map(|d| train(d, &cfg)).collect::<trainmap_core::Result<Vec<_>>>()?;
    let base = if results.len() > 1 { results.pop() } else { None };
    let (probe, report) = results.pop().expect("one probe trained");
    let ratio = base.as_ref().map(|(_, b)| codelength_ratio(&report, b)).transpose()?;
    let out = json!({
        "header": header,
        "config": cfg,
        "report": report,
        "mix_weights": probe.mix_weights(),
        "baseline_report": base.as_ref().map(|(_, b)| *b),
        "codelength_ratio": ratio,
        "probe": probe,
    });
    write_out(&a.output, &serde_json::to_string_pretty(&out)?)?;
    let mut inputs = vec![a.dump.clone()];
    inputs.extend(a.baseline.clone());
    record("probe-train", &inputs, std::slice::from_ref(&a.output), &a.output)
}

fn load_probe(path: &Path) -> CliResult<ProbeModel> {
    let v: serde_json::Value = serde_json::from_str(&read_text(path)?)?;
    let p = v.get("probe").cloned().unwrap_or(v);
    Ok(serde_json::from_value(p)?)
}

fn ssa(a: &SsaArgs) -> CliResult {
    let (pa, pb) = (load_probe(&a.a)?, load_probe(&a.b)?);
    if (pa.dim, pa.num_classes) != (pb.dim, pb.num_classes) {
        return Err(CliError::Data(format!(
            "probe shapes differ: {}x{} vs {}x{}",
            pa.dim, pa.num_classes, pb.dim, pb.num_classes
        )));
    }
    let r = subspace_angles(&pa.weight_means, &pb.weight_means, pa.dim, pa.num_classes)?;
    let mut rows: Vec<Vec<String>> = r.angles.iter().enumerate().map(|(i, t)| vec![i.to_string(), fmt(*t)]).collect();
    rows.push(vec!["mean".into(), fmt(r.mean)]);
    write_out(&a.output, &csv_text(&["index", "angle_deg"], rows)?)?;
    record("ssa", &[a.a.clone(), a.b.clone()], std::slice::from_ref(&a.output), &a.output)
}

fn correlate(a: &CorrelateArgs) -> CliResult {
    let mut by_size: BTreeMap<String, BTreeMap<(String, u64), f64>> = BTreeMap::new();
    for r in read_metric_long(&a.input)? {
        if by_size.entry(r.size.clone()).or_default().insert((r.task.clone(), r.step), r.value).is_some() {
            return Err(CliError::Data(format!("duplicate value for {}/{}/{}", r.size, r.task, r.step)));
        }
    }
    let mut keys: Option<Vec<(String, u64)>> = None;
    let mut trajectories = Vec::new();
    for (size, values) in &by_size {
        let k: Vec<(String, u64)> = values.keys().cloned().collect();
        match &keys {
            Some(first) if *first != k => {
                return Err(CliError::Data(format!("size {size} covers different (task, step) cells")))
            }
            None => keys = Some(k),
            _ => {}
        }
        trajectories.push((size.clone(), values.values().copied().collect::<Vec<f64>>()));
    }
    let s = trajectory_correlations(&trajectories)?;
    let mut rows = Vec::new();
    for i in 0..s.labels.len() {
        for j in 0..s.labels.len() {
            rows.push(vec![s.labels[i].clone(), s.labels[j].clone(), fmt(s.r[i][j]), fmt(s.p_values[i][j])]);
        }
    }
    write_out(&a.output, &csv_text(&["size_a", "size_b", "r", "p_value"], rows)?)?;
    let summary_path = sibling(&a.output, ".summary.json");
    write_out(&summary_path, &serde_json::to_string_pretty(&json!({ "sizes": s.labels, "fisher_mean_r": s.fisher_mean }))?)?;
    record("correlate", std::slice::from_ref(&a.input), &[a.output.clone(), summary_path], &a.output)
}

/// Script for `synth`: evenly spaced regimes, optional jitter on the last
/// switch, and anomaly runs that spike into the last regime ten checkpoints
/// after the second regime begins, then fall back to the first regime.
fn synth_script(a: &SynthArgs, checkpoints: bool) -> CliResult<RegimeScript> {
    if a.regimes == 0 {
        return Err(CliError::Usage("--regimes must be positive".into()));
    }
    let n = trainmap_core::tensorstore::default_schedule().len();
    let starts = RegimeScript::even_starts(n, a.regimes);
    let mut script = if checkpoints {
        RegimeScript::checkpoint_like(a.size.clone(), &starts, a.seeds)
    } else {
        RegimeScript::separated(a.size.clone(), &starts, a.separation, a.seeds)
    }
    .with_noise_scale(a.noise_scale);
    if let Some(last) = script.regimes.last_mut() {
        last.jitter = a.jitter;
    }
    if !a.anomaly_seeds.is_empty() {
        if a.regimes < 2 {
            return Err(CliError::Usage("anomalies need at least two regimes".into()));
        }
        script.anomaly = Some(Anomaly {
            seeds: a.anomaly_seeds.iter().copied().collect(),
            spike_index: starts[1] + 10,
            spike_len: 4,
            spike_regime: a.regimes - 1,
            return_regime: 0,
            return_len: 8,
        });
    }
    script.validate().map_err(|e| CliError::Usage(format!("invalid synthetic script: {e}")))?;
    Ok(script)
}

/// Accuracy table whose seed scores are a standardized linear function of the
/// true state counts, `0.01 * c_last - 0.05 * c_first`, plus `N(0, score_noise)`.
/// Time spent in the first regime (including fork returns) costs performance.
fn synth_accuracy(a: &SynthArgs, labels: &[Vec<usize>], out: &Path) -> CliResult<PathBuf> {
    let last = a.regimes - 1;
    let noise = Normal::new(0.0, a.score_noise).map_err(|e| CliError::Usage(format!("--score-noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0xacc);
    let linear: Vec<f64> = labels
        .iter()
        .map(|path| {
            let c_last = path.iter().filter(|&&l| l == last).count() as f64;
            let c_first = path.iter().filter(|&&l| l == 0).count() as f64;
            0.01 * c_last - 0.05 * c_first
        })
        .collect();
    let (m, sd) = (mean(&linear), population_variance(&linear).sqrt());
    let scores: Vec<f64> = linear
        .iter()
        .map(|v| if sd > 0.0 { (v - m) / sd } else { 0.0 } + noise.sample(&mut rng))
        .collect();
    let seeds: Vec<u64> = (0..labels.len() as u64).collect();
    let table = accuracy_table_from_scores(&a.size, &seeds, &scores, 4)?;
    let path = out.join("accuracy.csv");
    let mut buf = Vec::new();
    write_accuracy_csv(&table, &mut buf)?;
    write_out(&path, &String::from_utf8_lossy(&buf))?;
    Ok(path)
}

fn write_jsonl_file(path: &Path, log: &PredictionLog) -> CliResult {
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf)?;
    write_out(path, &String::from_utf8_lossy(&buf))
}

fn synth(a: &SynthArgs) -> CliResult {
    let out = &a.out_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let mut outputs = Vec::new();
    let mut echo = Vec::new();
    match a.kind {
        SynthKind::Series => {
            let script = synth_script(a, false)?;
            let ens = generate_stat_series(&script, a.seed)?;
            let stats = out.join("stats.csv");
            let mut buf = Vec::new();
            write_stats_csv(&ens.series, &mut buf)?;
            write_out(&stats, &String::from_utf8_lossy(&buf))?;
            let truth = out.join("truth.csv");
            let mut buf = Vec::new();
            write_truth_csv(&script.schedule, &ens.labels, &mut buf)?;
            write_out(&truth, &String::from_utf8_lossy(&buf))?;
            outputs.extend([stats, truth, synth_accuracy(a, &ens.labels, out)?]);
            echo.push(json!({ "kind": "series", "seed": a.seed, "script": script }));
        }
        SynthKind::Checkpoints => {
            let script = synth_script(a, true)?;
            let generated = generate_checkpoints(&script, a.seed, &default_tensor_specs(), out)?;
            outputs.extend(generated.manifests.iter().cloned());
            outputs.extend([out.join("truth.csv"), out.join("realized_stats.csv")]);
            outputs.push(synth_accuracy(a, &generated.labels, out)?);
            echo.push(json!({ "kind": "checkpoints", "seed": a.seed, "script": script, "tensors": default_tensor_specs() }));
        }
        SynthKind::Logs => {
            let cfg = SynthLogConfig {
                items: a.items,
                options: a.options,
                target_kappa: a.kappa,
                accuracy: a.accuracy,
                seed: a.seed,
                raters: a.seeds as usize,
                size: a.size.clone(),
                ..Default::default()
            };
            let logs = generate_prediction_logs(&cfg)?;
            for l in &logs {
                let p = out.join(format!("inter_seed/seed_{}.jsonl", l.header.seed));
                write_jsonl_file(&p, l)?;
                outputs.push(p);
                let realized = kappa_between(l, &logs[0])?.kappa;
                echo.push(json!({ "kind": "logs", "config": cfg, "seed": l.header.seed, "realized_kappa": realized, "realized_accuracy": accuracy(l)? }));
            }
            let steps = [1000, 2000, 4000, 8000, 16000, 32000, 64000, 143000];
            for l in generate_drifting_logs(&cfg, &steps)? {
                let p = out.join(format!("drift/step_{}.jsonl", l.header.step));
                write_jsonl_file(&p, &l)?;
                outputs.push(p);
            }
        }
        SynthKind::Probe => {
            let cfg = SynthTaskConfig {
                classes: a.classes,
                separation: a.separation,
                tokens_per_class: a.tokens_per_class,
                seed: a.seed,
                ..Default::default()
            };
            let random = SynthTaskConfig { separation: 0.0, seed: a.seed.wrapping_add(1), ..cfg.clone() };
            for (name, c) in [("trained", &cfg), ("random", &random)] {
                let data = generate_probe_task(c)?;
                let header = BTreeMap::from([
                    ("task".to_string(), "synthetic".to_string()),
                    ("size".to_string(), a.size.clone()),
                    ("step".to_string(), if name == "random" { "0".into() } else { "143000".into() }),
                ]);
                let p = out.join(format!("{name}.ptns"));
                write_representation_dump(&data, &header, &p)?;
                outputs.push(p);
                echo.push(json!({ "kind": "probe", "dump": name, "config": c, "tokens": data.items.len() }));
            }
        }
    }
    let echo_path = out.join("configs.jsonl");
    let lines: Vec<String> = echo.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    write_out(&echo_path, &(lines.join("\n") + "\n"))?;
    outputs.push(echo_path);
    record("synth", &[], &outputs, out)
}

fn report(a: &ReportArgs) -> CliResult {
    let svg = match a.figure {
        Figure::Downstream => {
            let t = read_long_table(&a.input)?;
            let mut cells: BTreeMap<String, BTreeMap<String, BTreeMap<u64, Vec<f64>>>> = BTreeMap::new();
            for (task, size, _seed, step, v) in &t.rows {
                cells.entry(size.clone()).or_default().entry(task.clone()).or_default().entry(*step).or_default().push(*v);
            }
            let panels: Vec<Panel> = cells
                .into_iter()
                .map(|(size, tasks)| Panel {
                    title: size,
                    y_label: t.value_name.clone(),
                    lines: tasks
                        .into_iter()
                        .map(|(task, steps)| {
                            let s: Vec<(u64, (f64, f64, f64))> = steps.into_iter().map(|(k, v)| (k, summarize(&v, a.mean_std))).collect();
                            Line {
                                label: task,
                                points: s.iter().map(|(k, (m, _, _))| (*k as f64, *m)).collect(),
                                band: Some(s.iter().map(|(_, (_, lo, hi))| (*lo, *hi)).collect()),
                            }
                        })
                        .collect(),
                })
                .collect();
            if panels.is_empty() {
                return Err(CliError::Data(format!("{} has no rows", a.input.display())));
            }
            line_panels(&panels)
        }
        Figure::Maps => {
            let maps = load_maps(&a.input)?;
            let rows: Vec<_> = maps.into_iter().map(|m| (m.size, m.seed, m.steps, m.states, m.forks)).collect();
            map_strips(&rows)
        }
        Figure::Truncation => {
            let text = read_text(&a.input)?;
            #[derive(serde::Deserialize)]
            struct Row {
                size: String,
                step: u64,
                r2: f64,
            }
            let mut lines: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for r in csv::Reader::from_reader(text.as_bytes()).deserialize::<Row>() {
                let r = r?;
                lines.entry(r.size).or_default().push((r.step as f64, r.r2));
            }
            let panel = Panel {
                title: "map-based prediction".into(),
                y_label: "R^2".into(),
                lines: lines.into_iter().map(|(label, points)| Line { label, points, band: None }).collect(),
            };
            line_panels(&[panel])
        }
    };
    write_out(&a.output, &svg)?;
    record("report", std::slice::from_ref(&a.input), std::slice::from_ref(&a.output), &a.output)
}
