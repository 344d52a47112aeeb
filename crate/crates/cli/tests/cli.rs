use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SUPPLY: &str = r#"{"id":"n1","attributes":{"gender":"male","age_bucket":"5"},"supply":200000}
{"id":"n2","attributes":{"state":"NV","age_bucket":"5"},"supply":200000}
{"id":"n3","attributes":{"gender":"male","state":"CA","age_bucket":"5"},"supply":100000}
{"id":"n4","attributes":{"state":"CA","age_bucket":"5"},"supply":100000}
{"id":"n5","attributes":{"gender":"male","state":"WA","age_bucket":"5"},"supply":200000}
{"id":"n6","attributes":{"state":"WA","age_bucket":"5"},"supply":120000}
"#;

const CONTRACTS: &str = r#"{"id":"male","targeting":"gender = male","demand":100000,"start":"2024-03-04T00:00:00Z","end":"2024-03-05T00:00:00Z"}
{"id":"ca","targeting":"state = CA","demand":200000,"start":"2024-03-04T00:00:00Z","end":"2024-03-05T00:00:00Z"}
{"id":"age5","targeting":"age_bucket = 5","demand":450000,"start":"2024-03-04T00:00:00Z","end":"2024-03-05T00:00:00Z"}
"#;

fn gdalloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdalloc"))
        .args(args)
        .env_remove("GD_SEED")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("supply.jsonl"), SUPPLY).unwrap();
        fs::write(dir.path().join("contracts.jsonl"), CONTRACTS).unwrap();
        let mut imps = String::new();
        for k in 0..600 {
            let (attrs, hour) = match k % 3 {
                0 => (r#"{"gender":"male","state":"CA","age_bucket":"5"}"#, k / 30),
                1 => (r#"{"state":"NV","age_bucket":"5"}"#, k / 30),
                _ => (r#"{"gender":"male","state":"WA","age_bucket":"5"}"#, k / 30),
            };
            imps.push_str(&format!(
                "{{\"id\":\"i{k}\",\"ts\":\"2024-03-04T{hour:02}:{:02}:00Z\",\"attributes\":{attrs},\"weight\":1000}}\n",
                k % 30 * 2
            ));
        }
        fs::write(dir.path().join("impressions.jsonl"), imps).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn plan(&self, algorithm: &str) -> PathBuf {
        let out = self.path(&format!("{algorithm}.plan.jsonl"));
        let o = gdalloc(&[
            "plan",
            "--supply",
            p(&self.path("supply.jsonl")),
            "--contracts",
            p(&self.path("contracts.jsonl")),
            "--algorithm",
            algorithm,
            "--out",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    }

    fn serve(&self, plan: &Path, seed: &str, out: &str) -> Output {
        gdalloc(&[
            "serve",
            "--plan",
            p(plan),
            "--contracts",
            p(&self.path("contracts.jsonl")),
            "--impressions",
            p(&self.path("impressions.jsonl")),
            "--seed",
            seed,
            "--out",
            p(&self.path(out)),
        ])
    }
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn hwm_plan_matches_the_worked_example() {
    let f = Fixture::new();
    let lines = jsonl(&f.plan("hwm"));
    let got: Vec<(String, f64)> = lines
        .iter()
        .map(|l| (l["contract_id"].as_str().unwrap().to_string(), l["alpha"].as_f64().unwrap()))
        .collect();
    assert_eq!(
        got,
        vec![("ca".into(), 1.0), ("male".into(), 0.25), ("age5".into(), 0.625)]
    );
}

#[test]
fn serving_is_reproducible_per_seed() {
    let f = Fixture::new();
    for algorithm in ["hwm", "dual"] {
        let plan = f.plan(algorithm);
        assert!(f.serve(&plan, "9", "a.jsonl").status.success());
        assert!(f.serve(&plan, "9", "b.jsonl").status.success());
        let a = fs::read_to_string(f.path("a.jsonl")).unwrap();
        assert_eq!(a, fs::read_to_string(f.path("b.jsonl")).unwrap());
        let decisions = jsonl(&f.path("a.jsonl"));
        assert_eq!(decisions.len(), 600);
        // Every impression is eligible for age5, so probabilities never exceed one.
        for d in &decisions {
            let total: f64 = d["probabilities"]
                .as_object()
                .map(|m| m.values().map(|v| v.as_f64().unwrap()).sum())
                .unwrap_or(0.0);
            assert!(total <= 1.0 + 1e-12, "{d}");
        }
    }
}

#[test]
fn ca_impressions_always_go_to_ca() {
    let f = Fixture::new();
    let plan = f.plan("hwm");
    assert!(f.serve(&plan, "1", "d.jsonl").status.success());
    for d in jsonl(&f.path("d.jsonl")) {
        let id = d["impression_id"].as_str().unwrap();
        let k: usize = id[1..].parse().unwrap();
        if k % 3 == 0 {
            assert_eq!(d["chosen"], "ca", "{d}");
        }
    }
}

#[test]
fn plan_contract_mismatch_names_the_contract() {
    let f = Fixture::new();
    let plan = f.plan("hwm");
    fs::write(f.path("contracts.jsonl"), CONTRACTS.lines().take(2).collect::<Vec<_>>().join("\n")).unwrap();
    let o = f.serve(&plan, "1", "d.jsonl");
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("age5"));
}

#[test]
fn malformed_targeting_fails() {
    let f = Fixture::new();
    fs::write(
        f.path("contracts.jsonl"),
        r#"{"id":"bad","targeting":"gender = ","demand":1,"start":"2024-03-04T00:00:00Z","end":"2024-03-05T00:00:00Z"}"#,
    )
    .unwrap();
    let o = gdalloc(&[
        "plan",
        "--supply",
        p(&f.path("supply.jsonl")),
        "--contracts",
        p(&f.path("contracts.jsonl")),
        "--out",
        p(&f.path("plan.jsonl")),
    ]);
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn empty_contracts_give_an_empty_plan() {
    let f = Fixture::new();
    fs::write(f.path("contracts.jsonl"), "").unwrap();
    let plan = f.plan("hwm");
    assert_eq!(fs::read_to_string(plan).unwrap().trim(), "");
}

#[test]
fn simulate_then_score() {
    let f = Fixture::new();
    fs::write(f.path("config.json"), r#"{"algorithm":"hwm","reopt_period_hours":2}"#).unwrap();
    let out = f.path("run");
    let o = gdalloc(&["simulate", "--config", p(&f.path("config.json")), "--scenario", p(f.dir.path()), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.json").exists());

    let scores = f.path("scores.json");
    let o = gdalloc(&[
        "metrics",
        "--timeseries",
        p(&out.join("delivery_timeseries.csv")),
        "--report",
        p(&out.join("report.json")),
        "--baseline",
        p(&out.join("report.json")),
        "--out",
        p(&scores),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(scores).unwrap()).unwrap();
    assert!(v["sigma75_finished"].as_f64().unwrap() >= 0.0);
    assert!(v.get("sigma75_unfinished").is_some());
}

#[test]
fn scenario_round_trips_through_simulate() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"num_contracts":4,"num_attributes":2,"contention":"medium","rng_seed":3,"horizon_days":2,"daily_impressions":2000}"#,
    )
    .unwrap();
    let sc = dir.path().join("sc");
    let o = gdalloc(&["scenario", "--spec", p(&spec), "--out", p(&sc)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["supply.jsonl", "contracts.jsonl", "impressions.jsonl"] {
        assert!(sc.join(name).exists(), "{name}");
    }
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, r#"{"algorithm":"dual","reopt_period_hours":4,"seed":2}"#).unwrap();
    let run = |out: &str| {
        let out = dir.path().join(out);
        let o = gdalloc(&["simulate", "--config", p(&cfg), "--scenario", p(&sc), "--mode", "sampled", "--out", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("report.json")).unwrap()
    };
    assert_eq!(run("r1"), run("r2"));
}

#[test]
fn unknown_config_field_is_rejected() {
    let f = Fixture::new();
    fs::write(f.path("config.json"), r#"{"algorithm":"hwm","reopt_period_hours":2,"bogus":1}"#).unwrap();
    let o = gdalloc(&["simulate", "--config", p(&f.path("config.json")), "--scenario", p(f.dir.path()), "--out", p(&f.path("run"))]);
    assert!(!o.status.success());
}
