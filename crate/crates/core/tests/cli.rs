use std::path::Path;
use std::process::Command;

use eplap::experiment::{cmd_experiment, cmd_plap_cache, DataSource, ExperimentConfig};
use eplap::graph::Graph;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_eplap"));
    c.env_remove("EPLAP_CACHE_DIR");
    c
}

fn small(cache: &Path) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::TwoMoons {
            n: 60,
            noise: 0.1,
            seed: 4,
        },
        train_per_class: 15,
        repetitions: 1,
        p_grid: vec![1.5, 2.0, 2.5],
        embed_dim: Some(10),
        plap_max_iters: 100,
        gamma_a_grid: vec![1e-4],
        gamma_i_grid: vec![1e2],
        cache_dir: Some(cache.to_path_buf()),
        ..Default::default()
    }
}

fn cache_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    v.sort();
    v
}

#[test]
fn plap_cache_is_idempotent_and_verified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let first = cmd_plap_cache(&cfg).unwrap();
    assert_eq!((first.computed, first.loaded, first.recomputed), (3, 0, 0));
    assert_eq!(cache_files(dir.path()).len(), 3);

    let again = cmd_plap_cache(&cfg).unwrap();
    assert_eq!((again.computed, again.loaded, again.recomputed), (0, 3, 0));
    assert_eq!(again.files, first.files);

    let victim = &first.files[1];
    let mut bytes = std::fs::read(victim).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(victim, &bytes).unwrap();
    let healed = cmd_plap_cache(&cfg).unwrap();
    assert_eq!((healed.computed, healed.loaded, healed.recomputed), (0, 2, 1));
    assert_eq!(cmd_plap_cache(&cfg).unwrap().loaded, 3);
}

#[test]
fn experiment_table_has_four_methods_per_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        fractions: vec![0.1, 0.2, 0.3, 0.5],
        candidate_sets: ExperimentConfig::default().candidate_sets,
        ..small(dir.path())
    };
    let report = cmd_experiment(&cfg).unwrap();
    assert_eq!(report.failed_cells(), 0);
    let agg = &report.payload.aggregates;
    assert_eq!(agg.len(), 16);
    for (block, &f) in agg.chunks(4).zip(&cfg.fractions) {
        let names: Vec<&str> = block.iter().map(|a| a.method.as_str()).collect();
        assert_eq!(names, ["LapR", "pLapR", "EpLapR-3G", "EpLapR-5G"]);
        assert!(block.iter().all(|a| a.fraction == f && a.n_ok == 1));
    }
    let cell = report.payload.cells.iter().find(|c| c.method == "EpLapR-5G").unwrap();
    assert_eq!(cell.tasks[0].mu.len(), 5);
    assert!(!cell.tasks[0].objective_trace.is_empty());
    assert_eq!(report.payload.config.seeds, vec![0]);
    assert_eq!(report.payload.resolved.embed_dim, 10);
}

#[test]
fn cli_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("moons.csv");
    let st = bin().args(["gen", "--n", "80", "--seed", "2", "--out"]).arg(&data).status().unwrap();
    assert!(st.success());

    let coo = d.join("g.coo");
    let st = bin()
        .args(["graph", "--k-neighbors", "5", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&coo)
        .status()
        .unwrap();
    assert!(st.success());
    let g = Graph::read_coo(std::io::BufReader::new(std::fs::File::open(&coo).unwrap())).unwrap();
    assert_eq!(g.n(), 80);

    let model = d.join("model.json");
    let st = bin()
        .args(["train", "--labeled-fraction", "0.1", "--p", "2.0,2.5", "--embed-dim", "12", "--data"])
        .arg(&data)
        .arg("--cache-dir")
        .arg(d.join("cache"))
        .arg("--out")
        .arg(&model)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(cache_files(&d.join("cache")).len(), 2);

    let out = bin().args(["eval", "--model"]).arg(&model).arg("--data").arg(&data).output().unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() > 0.8);
    assert_eq!(report["per_class_ap"].as_array().unwrap().len(), 2);
}

#[test]
fn cli_experiment_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("exp.toml");
    std::fs::write(
        &config,
        r#"
train_per_class = 15
fractions = [0.2]
repetitions = 1
embed_dim = 8
plap_max_iters = 50
gamma_a_grid = [1e-4]
gamma_i_grid = [100.0]
candidate_sets = [{ name = "E2", p_values = [2.0, 2.5] }]
[data]
kind = "two_moons"
n = 60
noise = 0.1
seed = 1
"#,
    )
    .unwrap();
    let json = d.join("out/results.json");
    let csv = d.join("table.csv");
    let st = bin()
        .args(["experiment", "--config"])
        .arg(&config)
        .arg("--output")
        .arg(&json)
        .arg("--csv-output")
        .arg(&csv)
        .env("EPLAP_CACHE_DIR", d.join("envcache"))
        .status()
        .unwrap();
    assert!(st.success());
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(doc["payload"]["cells"].as_array().unwrap().len(), 3);
    assert!(doc["timing"]["total_seconds"].as_f64().is_some());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
    assert_eq!(cache_files(&d.join("envcache")).len(), 3);

    let failing = d.join("bad.toml");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("gamma_a_grid = [1e-4]", "gamma_a_grid = [0.0]\nloss = \"svm\"")
        .replace("gamma_i_grid = [100.0]", "gamma_i_grid = [0.0]")
        + "[kernel]\nkind = \"linear\"\njitter = 0.0\n";
    std::fs::write(&failing, text).unwrap();
    let st = bin().args(["experiment", "--config"]).arg(&failing).arg("--output").arg(d.join("bad.json")).status().unwrap();
    assert_eq!(st.code(), Some(1));

    let invalid = d.join("invalid.toml");
    std::fs::write(&invalid, "p_grid = [1.0]\n").unwrap();
    let out = bin().args(["pgrid", "--config"]).arg(&invalid).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("p > 1"));
}
