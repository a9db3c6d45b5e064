use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, config: &str, command: &str) -> Output {
    let cfg = dir.join(format!("{command}.toml"));
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_maas-choice"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join(command))
        .arg(command)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "[scenario]\npresett = \"parallel\"\n", "simulate");
    assert!(!out.status.success());
    assert!(stderr(&out).contains("presett"), "{}", stderr(&out));
}

#[test]
fn missing_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "", "fit-offline");
    assert!(!out.status.success());
    assert!(stderr(&out).contains("input"), "{}", stderr(&out));

    let out = run(dir.path(), "input = \"nowhere\"\n", "run-online");
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nowhere"), "{}", stderr(&out));
}

#[test]
fn ingest_without_trip_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "", "ingest-trips");
    assert!(!out.status.success());
    assert!(stderr(&out).contains("trips"), "{}", stderr(&out));
}

#[test]
fn simulate_then_downstream_commands_write_expected_headers() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let sim = run(
        root,
        "seed = 3\n[scenario]\npreset = \"parallel\"\nintervals = 6\ndemand = 20\ncapacity = 15.0\n",
        "simulate",
    );
    assert!(sim.status.success(), "{}", stderr(&sim));
    let data = root.join("simulate");
    for f in ["nodes.csv", "links.csv", "routes.csv", "intervals.csv", "observations.csv", "ground_truth.csv"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    assert_eq!(header(&data.join("intervals.csv")), "t,link_id,flow,capacity_observed");
    assert_eq!(
        header(&data.join("observations.csv")),
        "t,Start CT,End CT,start.station id,end.station id,choice,cost,infreq,outfreq,out demand,in demand"
    );

    let cfg = "input = \"simulate\"\n[estimation]\ntied_theta = true\n";
    let fit = run(root, cfg, "fit-offline");
    assert!(fit.status.success(), "{}", stderr(&fit));
    let model = std::fs::read_to_string(root.join("fit-offline/model.json")).unwrap();
    assert!(model.contains("\"theta\""));
    std::fs::copy(root.join("fit-offline/model.json"), data.join("model.json")).unwrap();

    let online = run(root, cfg, "run-online");
    assert!(online.status.success(), "{}", stderr(&online));
    assert_eq!(header(&root.join("run-online/online_results.csv")), "t,link_id,u_hat,binding,w_hat");

    let compare = run(root, cfg, "compare-models");
    assert!(compare.status.success(), "{}", stderr(&compare));
    let text = std::fs::read_to_string(root.join("compare-models/model_comparison.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "variant,interval,match_score,loglik");
    for v in ["M1", "M2", "M3", "M4"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{v},"))), "no rows for {v}");
    }
}
