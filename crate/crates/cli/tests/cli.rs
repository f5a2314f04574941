use std::path::Path;
use std::process::{Command, Output};

fn trainmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trainmap")).args(args).output().expect("binary runs")
}

fn run(args: &[&str]) {
    let out = trainmap(args);
    assert!(out.status.success(), "trainmap {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = trainmap(&["stats", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = trainmap(&["map", "--stats", "/nonexistent/stats.csv", "--model", "/nonexistent/m.json", "-o", &s(&dir.path().join("m.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn malformed_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("stats.csv");
    std::fs::write(&bad, "size,seed,step\nx,1,oops\n").unwrap();
    let out = trainmap(&["hmm-fit", "--stats", &s(&bad), "--states", "2", "-o", &s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn series_pipeline_is_idempotent_and_writes_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = d.join("synth");
    run(&["synth", "--kind", "series", "--out-dir", &s(&synth), "--seeds", "6", "--anomaly-seeds", "1"]);
    assert!(synth.join("provenance.json").exists());
    let stats = s(&synth.join("stats.csv"));
    let acc = s(&synth.join("accuracy.csv"));
    let model = s(&d.join("model.json"));
    run(&["hmm-fit", "--stats", &stats, "--mode", "pooled", "--states", "3", "--restarts", "3", "-o", &model]);
    assert!(d.join("model.json.fit.json").exists());
    let maps_a = d.join("a.csv");
    let maps_b = d.join("b.csv");
    for out in [&maps_a, &maps_b] {
        run(&["map", "--stats", &stats, "--mode", "pooled", "--model", &model, "-o", &s(out)]);
    }
    assert_eq!(std::fs::read(&maps_a).unwrap(), std::fs::read(&maps_b).unwrap());
    let prov: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("a.csv.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["subcommand"], "map");
    assert_eq!(prov["inputs"].as_array().unwrap().len(), 2);

    let maps = s(&maps_a);
    run(&["hmm-select", "--stats", &stats, "--mode", "pooled", "--min-states", "2", "--max-states", "4", "--restarts", "2", "-o", &s(&d.join("bic.csv"))]);
    run(&["drivers", "--model", &model, "--from", "0", "--to", "1", "-o", &s(&d.join("drivers.csv"))]);
    run(&["transitions", "--maps", &maps, "--states", "3", "-o", &s(&d.join("tr.csv"))]);
    run(&["zero-shot", "--model", &model, "--stats", &stats, "--mode", "pooled", "-o", &s(&d.join("zs.csv"))]);
    run(&["predict", "--maps", &maps, "--accuracy", &acc, "--states", "3", "-o", &s(&d.join("pred.csv"))]);
    run(&["truncate", "--maps", &maps, "--accuracy", &acc, "--states", "3", "--steps", "1000,50000,143000", "-o", &s(&d.join("trunc.csv"))]);
    run(&["outliers", "--accuracy", &acc, "-o", &s(&d.join("outliers.csv"))]);
    run(&["report", "--figure", "truncation", "--input", &s(&d.join("trunc.csv")), "-o", &s(&d.join("trunc.svg"))]);
    run(&["report", "--figure", "maps", "--input", &maps, "-o", &s(&d.join("maps.svg"))]);

    let bic = std::fs::read_to_string(d.join("bic.csv")).unwrap();
    assert_eq!(bic.lines().count(), 4);
    assert!(bic.starts_with("k,log_likelihood,bic,chosen"));
    let trunc = std::fs::read_to_string(d.join("trunc.csv")).unwrap();
    assert_eq!(trunc.lines().count(), 4);
    assert!(std::fs::read_to_string(d.join("maps.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn agreement_commands_on_synthetic_logs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let logs = d.join("logs");
    run(&["synth", "--kind", "logs", "--out-dir", &s(&logs), "--seeds", "3", "--items", "2000", "--kappa", "0.6"]);
    let seeds: Vec<String> = (0..3).map(|i| s(&logs.join(format!("inter_seed/seed_{i}.jsonl")))).collect();
    let mut args = vec!["kappa", "-o"];
    let kappa_out = s(&d.join("kappa.csv"));
    args.push(&kappa_out);
    args.push("--logs");
    args.extend(seeds.iter().map(String::as_str));
    run(&args);
    let text = std::fs::read_to_string(d.join("kappa.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<(u64, f64)> = rdr.records().map(|r| r.unwrap()).map(|r| (r[2].parse().unwrap(), r[7].parse().unwrap())).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0], (0, 1.0));
    let kappas: Vec<f64> = rows[1..].iter().map(|r| r.1).collect();
    assert!(kappas.iter().all(|k| (k - 0.6).abs() < 0.06), "{kappas:?}");

    let drift: Vec<String> = std::fs::read_dir(logs.join("drift")).unwrap().map(|e| s(&e.unwrap().path())).collect();
    let mut args = vec!["self-consistency", "-o"];
    let sc_out = s(&d.join("sc.csv"));
    args.push(&sc_out);
    args.push("--logs");
    args.extend(drift.iter().map(String::as_str));
    run(&args);
    assert_eq!(std::fs::read_to_string(d.join("sc.csv")).unwrap().lines().count(), drift.len() + 1);

    let mut args = vec!["accuracy", "-o"];
    let acc_out = s(&d.join("acc.csv"));
    args.push(&acc_out);
    args.push("--logs");
    args.extend(seeds.iter().map(String::as_str));
    run(&args);
    assert_eq!(std::fs::read_to_string(d.join("acc.csv")).unwrap().lines().count(), 4);
    run(&["report", "--figure", "downstream", "--input", &acc_out, "-o", &s(&d.join("acc.svg"))]);
    assert!(std::fs::read_to_string(d.join("acc.svg")).unwrap().contains("synthetic"));

    let text = std::fs::read_to_string(&seeds[1]).unwrap();
    let short: Vec<&str> = text.lines().collect();
    let short_path = d.join("short.jsonl");
    std::fs::write(&short_path, short[..short.len() - 1].join("\n")).unwrap();
    let mismatched = trainmap(&["kappa", "--logs", &seeds[0], &s(&short_path), "-o", &kappa_out]);
    assert_eq!(mismatched.status.code(), Some(1));
}

#[test]
fn probe_ssa_correlate_and_bias() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let probe = d.join("probe");
    run(&["synth", "--kind", "probe", "--out-dir", &s(&probe), "--tokens-per-class", "120"]);
    let (trained, random) = (s(&probe.join("trained.ptns")), s(&probe.join("random.ptns")));
    let (pa, pb) = (s(&d.join("a.json")), s(&d.join("b.json")));
    run(&["probe-train", "--dump", &trained, "--baseline", &random, "--epochs", "20", "-o", &pa]);
    run(&["probe-train", "--dump", &trained, "--epochs", "20", "--seed", "3", "-o", &pb]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&pa).unwrap()).unwrap();
    assert!(report["codelength_ratio"].as_f64().unwrap() < 0.8);
    run(&["ssa", "--a", &pa, "--b", &pb, "-o", &s(&d.join("ssa.csv"))]);
    let ssa = std::fs::read_to_string(d.join("ssa.csv")).unwrap();
    assert!(ssa.lines().last().unwrap().starts_with("mean,"));

    let mut long = String::from("size,task,step,value\n");
    for (m, size) in ["70m", "160m", "410m"].iter().enumerate() {
        for step in 0..8u64 {
            long.push_str(&format!("{size},kappa,{},{}\n", step * 1000, (step as f64).sqrt() + 0.01 * m as f64 * (step % 3) as f64));
        }
    }
    std::fs::write(d.join("long.csv"), long).unwrap();
    run(&["correlate", "--input", &s(&d.join("long.csv")), "-o", &s(&d.join("corr.csv"))]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("corr.csv.summary.json")).unwrap()).unwrap();
    assert!(summary["fisher_mean_r"].as_f64().unwrap() > 0.9);

    std::fs::write(
        d.join("pairs.csv"),
        "task,size,seed,step,stereotypical,anti_stereotypical\nbias,70m,0,1000,-1.0,-2.0\nbias,70m,0,1000,-3.0,-2.0\nbias,70m,0,1000,-1.0,-1.5\nbias,70m,0,1000,-2.0,-2.5\n",
    )
    .unwrap();
    run(&["bias", "--pairs", &s(&d.join("pairs.csv")), "-o", &s(&d.join("bias.csv"))]);
    let bias = std::fs::read_to_string(d.join("bias.csv")).unwrap();
    assert!(bias.lines().nth(1).unwrap().ends_with(",4,0.75"), "{bias}");
}
