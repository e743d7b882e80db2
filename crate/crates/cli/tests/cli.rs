use std::process::{Command, Output};

fn divest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divest")).args(args).output().expect("spawn divest")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const GAUSS_P: &str = "gauss:d=1,mean=0,sigma=1";
const GAUSS_Q: &str = "gauss:d=1,mean=1,sigma=1";

#[test]
fn oracle_closed_form() {
    let out =
        divest(&["oracle", "--divergence", "kl", "--dist-p", GAUSS_P, "--dist-q", GAUSS_Q, "--method", "closed-form"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v = json(&out);
    assert_eq!(v["kind"], "kl");
    assert_eq!(v["method"], "closed_form");
    assert!((v["value"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(v["stderr"].as_f64(), Some(0.0));
    assert!(v.get("detail").is_some());
}

#[test]
fn dist_typo_is_a_usage_error() {
    let out = divest(&[
        "estimate",
        "--divergence",
        "tv",
        "--dist-p",
        "tgaus:d=1,mean=0.4,sigma=0.2",
        "--dist-q",
        "uniform:d=1",
        "--n",
        "100",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("--dist-p"), "{err}");
    assert!(err.contains("tgaus"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_flag_is_rejected() {
    let out = divest(&["oracle", "--divergence", "kl", "--dist-p", GAUSS_P, "--dist-q", GAUSS_Q, "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--bogus"));
}

#[test]
fn bad_divergence_and_flag_combinations() {
    let out = divest(&["oracle", "--divergence", "js", "--dist-p", GAUSS_P, "--dist-q", GAUSS_Q]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--divergence"));

    let out = divest(&[
        "estimate",
        "--divergence",
        "chi2",
        "--dv",
        "--dist-p",
        "uniform:d=1",
        "--dist-q",
        "uniform:d=1",
        "--n",
        "10",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = divest(&["estimate", "--divergence", "kl", "--dist-p", GAUSS_P, "--dist-q", GAUSS_Q, "--n", "10"]);
    assert_eq!(out.status.code(), Some(2), "auto radius without M must be refused");
    assert!(stderr(&out).contains("--m"));

    let out = divest(&["mine", "--rho", "1.5", "--n", "10"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one() {
    let out =
        divest(&["oracle", "--divergence", "tv", "--dist-p", GAUSS_P, "--dist-q", GAUSS_Q, "--method", "closed-form"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no closed form"));
}

#[test]
fn estimate_is_deterministic_and_logs_config() {
    let args = [
        "estimate",
        "--divergence",
        "kl",
        "--dist-p",
        "tgauss:d=1,mean=0.3,sigma=0.2",
        "--dist-q",
        "uniform:d=1",
        "--n",
        "500",
        "--k",
        "8",
        "--steps",
        "50",
        "--restarts",
        "2",
        "--lr",
        "0.5",
        "--seed",
        "3",
    ];
    let a = divest(&args);
    let b = divest(&args);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert!(stderr(&a).starts_with("config: {"));
    let v = json(&a);
    assert_eq!(v["kind"], "kl");
    assert_eq!(v["per_restart"].as_array().unwrap().len(), 2);
    assert!(v.get("trace").is_none());
    assert!(v["value"].as_f64().unwrap() >= 0.0);

    let mut traced = args.to_vec();
    traced.push("--trace");
    let t = json(&divest(&traced));
    assert_eq!(t["trace"].as_array().unwrap().len(), 50);
}

#[test]
fn estimate_text_output() {
    let out = divest(&[
        "estimate",
        "--divergence",
        "tv",
        "--dist-p",
        "uniform:d=1",
        "--dist-q",
        "uniform:d=1",
        "--n",
        "200",
        "--k",
        "4",
        "--steps",
        "20",
        "--restarts",
        "1",
        "--out",
        "text",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("tv estimate: "));
}

#[test]
fn mine_independent_pair_is_near_zero() {
    let out = divest(&[
        "mine",
        "--rho",
        "0",
        "--n",
        "10000",
        "--k",
        "32",
        "--seed",
        "1",
        "--steps",
        "300",
        "--lr",
        "0.5",
        "--restarts",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v = json(&out);
    assert!(v["value"].as_f64().unwrap().abs() <= 0.05, "{v}");
    assert_eq!(v["kind"], "kl-dv");
    assert!(v["reference"]["value"].as_f64().unwrap().abs() < 1e-15);
}

#[test]
fn mine_correlated_pairs() {
    for (rho, mi, tol) in [("0.5", 0.143841, 0.05), ("0.9", 0.830366, 0.08)] {
        let out = divest(&[
            "mine",
            "--rho",
            rho,
            "--n",
            "20000",
            "--k",
            "64",
            "--seed",
            "1",
            "--steps",
            "1000",
            "--lr",
            "0.5",
            "--restarts",
            "1",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let v = json(&out);
        let est = v["value"].as_f64().unwrap();
        assert!((est - mi).abs() <= tol, "rho {rho}: {est} vs {mi}");
        assert!((v["reference"]["value"].as_f64().unwrap() - mi).abs() < 1e-6);
    }
}

#[test]
fn sweep_then_rate_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.json");
    let csv = dir.path().join("out.csv");
    std::fs::write(
        &cfg,
        r#"{
            "kinds": ["kl"],
            "pairs": [{"id": "tg", "p": "tgauss:d=1,mean=0.3,sigma=0.2", "q": "uniform:d=1"}],
            "n_grid": [64, 128, 256],
            "k_rule": {"type": "fixed", "k": 4},
            "seeds": 2,
            "root_seed": 5,
            "train": {"steps": 30, "step_size": 0.5, "restarts": 1}
        }"#,
    )
    .unwrap();
    let out = divest(&["sweep", "--config", cfg.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(json(&out)["records"], 6);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.starts_with(
        "kind,pair,d,n,k,seed,estimate,oracle,abs_error,signed_error,wall_ms,restarts,m_k,t_k,r_k,status\n"
    ));

    let again = dir.path().join("again.csv");
    divest(&["sweep", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(&again).unwrap());

    let fit = divest(&["rate-fit", "--in", csv.to_str().unwrap(), "--axis", "n"]);
    assert_eq!(fit.status.code(), Some(0), "{}", stderr(&fit));
    let v = json(&fit);
    assert_eq!(v["points"], 3);
    assert!(v["slope"].as_f64().unwrap().is_finite());
    assert!(v["r2"].as_f64().unwrap() >= 0.0);
}

#[test]
fn sweep_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"kinds": ["kl"]}"#).unwrap();
    let out = divest(&["sweep", "--config", cfg.to_str().unwrap(), "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let missing = divest(&["sweep", "--config", dir.path().join("none.json").to_str().unwrap(), "--out", "x.csv"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn approx_check_reports_each_width() {
    let out = divest(&[
        "approx-check",
        "--dist-p",
        "tgauss:d=1,mean=0.4,sigma=0.2",
        "--dist-q",
        "uniform:d=1",
        "--k",
        "4,8",
        "--seeds",
        "1",
        "--grid",
        "256",
        "--steps",
        "30",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = json(&out);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r["l2_error"].as_f64().unwrap() <= r["sup_error"].as_f64().unwrap());
    }
}
