use std::path::Path;
use std::process::{Command, Output};

fn mdist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdist"))
        .args(args)
        .env_remove("MDIST_THREADS")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn dir_entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn radius_reports_threshold() {
    let out = mdist(&["radius", "--order", "2", "--convention", "paper", "--norm", "2", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!((v["rho_max"].as_f64().unwrap() - 0.1315).abs() < 1e-3);
    assert!((v["sigma_min"]["2"].as_f64().unwrap() - 2.93).abs() < 0.01);
    // the convention notice goes to stderr, not into the JSON
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn usage_errors_exit_two() {
    let cases: [&[&str]; 4] = [
        &["density", "--cutoff", "10", "--sigma", "1.5", "--grid", "0"],
        &["density", "--cutoff", "10", "--sigma", "1.5", "--grid", "63"],
        &["radius", "--order", "2", "-o", "x"],
        &["average", "--cutoff", "5", "--sigma", "1.5", "--functional", "cube:1"],
    ];
    for args in cases {
        let out = mdist(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn numerical_errors_exit_one_and_leave_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("avg.json");
    let t = target.to_str().unwrap();
    // quadrature is limited to three sites
    let out = mdist(&[
        "average", "--cutoff", "30", "--sigma", "1.5", "--functional", "moment:1,1",
        "--method", "quad", "--out", t,
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = mdist(&["tailbound", "--sigma", "1", "--cutoff", "10", "--out", t]);
    assert_eq!(out.status.code(), Some(1));
    assert!(dir_entries(dir.path()).is_empty());
}

#[test]
fn verify_derivative_table() {
    let out = mdist(&["verify-derivative", "--max-order", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8(out.stdout).unwrap();
    let derived_fail = table
        .lines()
        .any(|l| l.contains("derived") && l.ends_with("FAIL"));
    assert!(!derived_fail, "{table}");
    assert!(table.lines().any(|l| l.contains("paper") && l.ends_with("FAIL")));
}

#[test]
fn density_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let p = dir.path().join(name);
        let out = mdist(&[
            "density", "--cutoff", "11", "--sigma", "1.5", "--grid", "32", "--method",
            "histogram", "--samples", "2e4", "--seed", "5", "--threads", threads, "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(p).unwrap()
    };
    let a = run("a.csv", "1");
    let b = run("b.csv", "3");
    assert_eq!(a, b);
    assert_eq!(
        dir_entries(dir.path()),
        ["a.csv", "a.csv.manifest.json", "b.csv", "b.csv.manifest.json"]
    );
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next(), Some("re,im,density"));
    assert_eq!(text.lines().count(), 1 + 32 * 32);

    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("b.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["threads"], 3);
    assert_eq!(m["parameters"]["grid"], 32);
    assert_eq!(m["subcommand"], "density");
    assert!(m["command_line"].as_array().unwrap().iter().any(|a| a == "--seed"));
    assert!((m["summary"]["mass"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.json");
    let out = Command::new(env!("CARGO_BIN_EXE_mdist"))
        .args(["sites", "--cutoff", "10", "--out", p.to_str().unwrap()])
        .env("MDIST_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("s.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 2);
}

#[test]
fn sites_of_gaussian_field() {
    let out = mdist(&["sites", "--disc", "-4", "--cutoff", "10", "--json"]);
    assert!(out.status.success());
    let v = json(&out);
    let norms: Vec<u64> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["norm"].as_u64().unwrap())
        .collect();
    assert_eq!(norms, [2, 5, 5, 9]);
    assert!(v[0].get("residue_prime").is_some());
}

#[test]
fn average_and_family_outputs() {
    let out = mdist(&[
        "average", "--cutoff", "2", "--sigma", "1", "--functional", "moment:1,1", "--method",
        "quad", "--json",
    ]);
    let v = json(&out);
    let exact = std::f64::consts::LN_2.powi(4) * 20.0 / 27.0;
    assert!((v["value_re"].as_f64().unwrap() - exact).abs() < 1e-12);
    for key in ["value_im", "stderr", "n", "seed"] {
        assert!(v.get(key).is_some(), "{key}");
    }

    let out = mdist(&[
        "weyl", "--exponents", "1", "--conductor-max", "101", "--trace", "--json",
    ]);
    let v = json(&out);
    let trace = v["trace"].as_array().unwrap();
    let last = trace.last().unwrap();
    assert_eq!(last["conductor"], 101);
    assert!((last["inner_average"][0].as_f64().unwrap() + 2.0 / 98.0).abs() < 1e-14);

    let out = mdist(&[
        "family-avg", "--conductor-max", "200", "--cutoff", "5", "--sigma", "1.5",
        "--functional", "psi:1,0.5", "--json",
    ]);
    assert!(out.status.success());
    assert!(json(&out)["n_conductors"].as_u64().unwrap() > 10);
}

#[test]
fn convention_notice_recorded_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.json");
    let out = mdist(&[
        "gvalues", "--norm", "2", "--sigma", "1.5", "--order", "2", "--convention", "paper",
        "--angles", "8", "--out", p.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("g.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["warnings"].as_array().unwrap().len(), 1);
    let body: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
    assert_eq!(body["values"].as_array().unwrap().len(), 8);
}
