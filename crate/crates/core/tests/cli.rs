use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_routeguard");

fn params(n: usize, lambda: f64, gamma: f64, a: f64, p: &str, cb: f64, ca: f64) -> String {
    format!(
        "[params]\nn = {n}\nlambda = {lambda}\nmu = 1.0\ngamma = {gamma}\nfault_prob = {a}\n\
         routing_probs = {p}\nprotect_cost = {cb}\nattack_cost = {ca}\n"
    )
}

fn write_config(dir: &TempDir, body: &str) -> PathBuf {
    let path = dir.path().join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--no-timestamp")
        .env_remove("ROUTEGUARD_CONFIG")
        .env_remove("ROUTEGUARD_OUT")
        .env_remove("ROUTEGUARD_FORMAT")
        .env_remove("ROUTEGUARD_SEED")
        .env_remove("ROUTEGUARD_METHOD")
        .output()
        .unwrap()
}

/// Header and rows of a CSV table, skipping `#` provenance lines.
fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).flat_map(|l| [l, "\n"]).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column<'a>(header: &[String], rows: &'a [Vec<String>], name: &str) -> Vec<&'a str> {
    let k = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[k].as_str()).collect()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn stable_toy_system_is_certified() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!("{}[grid]\nbound = 8\n", params(2, 0.5, 0.5, 0.2, "[0.5, 0.5]", 0.5, 1.0)));
    let out = dir.path().join("out");
    let o = run(&["check-stability"], &cfg, &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = table(&out.join("stability.csv"));
    assert!(column(&h, &rows, "stable").iter().all(|s| *s == "true"));
    assert_eq!(column(&h, &rows, "subject"), ["unprotected", "optimal", "always-protect", "never-protect"]);
    assert!(out.join("floors.csv").exists());
}

#[test]
fn overload_reports_capacity_violation() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!("{}[grid]\nbound = 6\n", params(2, 2.5, 0.5, 0.2, "[0.5, 0.5]", 0.5, 1.0)));
    let out = dir.path().join("out");
    let o = run(&["check-stability"], &cfg, &out);
    assert_eq!(code(&o), 0);
    let (h, rows) = table(&out.join("stability.csv"));
    assert_eq!(column(&h, &rows, "stable")[0], "false");
    assert_eq!(column(&h, &rows, "reason")[0], "capacity-violated");
}

#[test]
fn fault_free_system_never_protects() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!("{}[grid]\nbound = 10\n", params(2, 1.0, 0.5, 0.0, "[0.3, 0.7]", 0.01, 1.0)));
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["solve-reliability"], &cfg, &out)), 0);
    let (h, rows) = table(&out.join("policy.csv"));
    assert!(column(&h, &rows, "protect").iter().all(|b| b.parse::<f64>().unwrap() == 0.0));
}

#[test]
fn tiny_grid_matches_enumeration_fixture() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    for (file, cb) in [("tiny_value.csv", 0.1), ("tiny_value_cheap.csv", 0.01)] {
        let dir = TempDir::new().unwrap();
        let body = format!(
            "{}[grid]\nbound = 2\nmargin = 1\n[solver]\nepsilon = 1e-11\n",
            params(2, 1.0, 1.0, 0.9, "[0.1, 0.9]", cb, 1.0)
        );
        let cfg = write_config(&dir, &body);
        let out = dir.path().join("out");
        for method in ["vi", "tpi"] {
            assert_eq!(code(&run(&["solve-reliability", "--method", method], &cfg, &out)), 0);
            let (h, rows) = table(&out.join("policy.csv"));
            let (fh, frows) = table(&fixtures.join(file));
            assert_eq!(column(&h, &rows, "x1"), column(&fh, &frows, "x1"));
            assert_eq!(column(&h, &rows, "x2"), column(&fh, &frows, "x2"));
            for (got, want) in column(&h, &rows, "value").iter().zip(column(&fh, &frows, "value")) {
                let (g, w): (f64, f64) = (got.parse().unwrap(), want.parse().unwrap());
                assert!((g - w).abs() < 1e-6, "{file} {method}: {g} vs {w}");
            }
            for (got, want) in column(&h, &rows, "protect").iter().zip(column(&fh, &frows, "protect")) {
                assert_eq!(got.parse::<f64>().unwrap(), want.parse::<f64>().unwrap(), "{file} {method}");
            }
        }
    }
}

#[test]
fn prohibitive_attack_cost_is_all_quiet() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!("{}[grid]\nbound = 10\n", params(2, 1.0, 0.5, 0.0, "[0.5, 0.5]", 0.2, 1e6)));
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["solve-security"], &cfg, &out)), 0);
    let (h, rows) = table(&out.join("equilibrium.csv"));
    assert!(column(&h, &rows, "label").iter().all(|l| *l == "S1"));
    assert!(column(&h, &rows, "attack").iter().all(|v| v.parse::<f64>().unwrap() == 0.0));
}

#[test]
fn regime_sweep_has_no_s2_when_attack_dearer() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        "{}[grid]\nbound = 10\n[sweep]\nattack_costs = [0.05, 0.5, 5.0]\nprotect_costs = [0.1, 1.0]\n",
        params(2, 1.0, 0.5, 0.0, "[0.5, 0.5]", 0.2, 0.1)
    );
    let cfg = write_config(&dir, &body);
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["solve-security", "--regime-sweep"], &cfg, &out)), 0);
    let (h, rows) = table(&out.join("regimes.csv"));
    assert_eq!(rows.len(), 6);
    for ((ca, cb), s2) in
        column(&h, &rows, "attack_cost").iter().zip(column(&h, &rows, "protect_cost")).zip(column(&h, &rows, "s2"))
    {
        if ca.parse::<f64>().unwrap() > cb.parse::<f64>().unwrap() {
            assert_eq!(s2, "false", "c_a={ca} c_b={cb}");
        }
    }
    let (h2, rows2) = table(&out.join("solve_report.csv"));
    assert_eq!(column(&h2, &rows2, "converged"), ["true"]);
}

#[test]
fn static_policies_agree_without_faults() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        "{}[grid]\nbound = 10\n[sim]\nhorizon = 200.0\nreplications = 8\n",
        params(2, 1.0, 0.5, 0.0, "[0.5, 0.5]", 0.3, 1.0)
    );
    let cfg = write_config(&dir, &body);
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["simulate", "--policies", "always-protect,never-protect"], &cfg, &out)), 0);
    let (h, rows) = table(&out.join("estimates.csv"));
    let q = column(&h, &rows, "mean_queue");
    assert_eq!(q[0], q[1], "queue paths must coincide under common random numbers");
    let m: Vec<f64> = column(&h, &rows, "mean").iter().map(|v| v.parse().unwrap()).collect();
    // The only difference is the protection charge accrued over the horizon.
    let charge = 0.3 * (1.0 - (-0.5f64 * 200.0).exp()) / 0.5;
    assert!((m[0] - m[1] - charge).abs() < 1e-9, "{} vs {}", m[0] - m[1], charge);
}

#[test]
fn single_server_mean_queue() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        "{}[grid]\nbound = 10\n[sim]\nhorizon = 20000.0\nreplications = 10\n",
        params(1, 0.5, 0.1, 0.0, "[1.0]", 1.0, 1.0)
    );
    let cfg = write_config(&dir, &body);
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["simulate", "--policies", "never-protect"], &cfg, &out)), 0);
    let (h, rows) = table(&out.join("estimates.csv"));
    let q: f64 = column(&h, &rows, "mean_queue")[0].parse().unwrap();
    assert!((q - 1.0).abs() < 0.08, "mean queue {q}");
    assert_eq!(column(&h, &rows, "certified")[0], "true");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        "{}[grid]\nbound = 8\n[sim]\nhorizon = 100.0\nreplications = 4\n",
        params(2, 1.0, 0.5, 0.5, "[0.2, 0.8]", 0.2, 1.0)
    );
    let cfg = write_config(&dir, &body);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["simulate", "--seed", "7"], &cfg, &a)), 0);
    assert_eq!(code(&run(&["simulate", "--seed", "7"], &cfg, &b)), 0);
    let read = |d: &Path| std::fs::read_to_string(d.join("estimates.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let text = read(&a);
    assert!(text.starts_with("# schema_version=1\n"));
    assert!(text.contains("# sim.seed=7\n"));
    assert!(!text.contains("generated_unix"));
    let c = dir.path().join("c");
    assert_eq!(code(&run(&["simulate", "--seed", "8"], &cfg, &c)), 0);
    assert_ne!(read(&a), read(&c));
}

#[test]
fn json_output_and_env_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!("{}[grid]\nbound = 6\n", params(2, 1.0, 0.5, 0.5, "[0.2, 0.8]", 0.2, 1.0)));
    let out = dir.path().join("out");
    let o = Command::new(BIN)
        .arg("solve-reliability")
        .env("ROUTEGUARD_CONFIG", &cfg)
        .env("ROUTEGUARD_OUT", &out)
        .env("ROUTEGUARD_FORMAT", "json")
        .env("ROUTEGUARD_METHOD", "vi")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("solve_report.json")).unwrap()).unwrap();
    assert_eq!(doc["table"], "solve_report");
    assert_eq!(doc["rows"][0]["method"], "vi");
    assert_eq!(doc["rows"][0]["converged"], true);
    assert_eq!(doc["meta"]["schema_version"], "1");
    let policy: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("policy.json")).unwrap()).unwrap();
    assert_eq!(policy["rows"].as_array().unwrap().len(), 49);
}

#[test]
fn policy_file_round_trips_through_simulate() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        "{}[grid]\nbound = 8\n[sim]\nhorizon = 100.0\nreplications = 4\n",
        params(2, 1.0, 0.5, 0.7, "[0.2, 0.8]", 0.05, 1.0)
    );
    let cfg = write_config(&dir, &body);
    let solved = dir.path().join("solved");
    assert_eq!(code(&run(&["solve-reliability"], &cfg, &solved)), 0);
    let file = format!("file:{}", solved.join("policy.csv").display());
    let out = dir.path().join("out");
    let o = run(&["simulate", "--policies", &format!("optimal,{file}")], &cfg, &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = table(&out.join("estimates.csv"));
    let m = column(&h, &rows, "mean");
    assert_eq!(m[0], m[1]);
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let bad = write_config(&dir, "[params]\nn = 2\nlambda = 1.0\n");
    assert_eq!(code(&run(&["solve-reliability"], &bad, &out)), 2);
    let neg = write_config(&dir, &params(2, 1.0, -0.5, 0.5, "[0.5, 0.5]", 0.2, 1.0));
    assert_eq!(code(&run(&["solve-reliability"], &neg, &out)), 2);
    let good = write_config(&dir, &format!("{}[grid]\nbound = 4\n", params(2, 1.0, 0.5, 0.5, "[0.5, 0.5]", 0.2, 1.0)));
    assert_eq!(code(&run(&["simulate", "--policies", "bogus"], &good, &out)), 2);
    assert_eq!(code(&run(&["no-such-command"], &good, &out)), 2);
}

#[test]
fn missing_config_file_exits_4() {
    let dir = TempDir::new().unwrap();
    let o = run(&["solve-reliability"], &dir.path().join("absent.toml"), &dir.path().join("out"));
    assert_eq!(code(&o), 4);
}

#[test]
fn unwritable_output_exits_4() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, &format!("{}[grid]\nbound = 4\n", params(2, 1.0, 0.5, 0.5, "[0.5, 0.5]", 0.2, 1.0)));
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    assert_eq!(code(&run(&["solve-reliability"], &cfg, &blocker.join("sub"))), 4);
}

#[test]
fn non_convergence_exits_3_and_still_writes() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        "{}[grid]\nbound = 10\n[solver]\nmax_iterations = 2\n",
        params(2, 1.0, 0.1, 0.5, "[0.5, 0.5]", 0.2, 1.0)
    );
    let cfg = write_config(&dir, &body);
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["solve-reliability"], &cfg, &out)), 3);
    let (h, rows) = table(&out.join("solve_report.csv"));
    assert_eq!(column(&h, &rows, "converged"), ["false"]);
}

#[test]
fn tipping_points_table() {
    let dir = TempDir::new().unwrap();
    let body = format!(
        "{}[grid]\nbound = 8\n[sweep]\nfault_probs = [0.0, 0.5, 1.0]\nprotect_costs = [0.01, 100.0]\n",
        params(2, 1.0, 0.5, 0.5, "[0.1, 0.9]", 0.2, 1.0)
    );
    let cfg = write_config(&dir, &body);
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["tipping-points"], &cfg, &out)), 0);
    let (h, rows) = table(&out.join("tipping.csv"));
    assert_eq!(rows.len(), 6);
    let a = column(&h, &rows, "fault_prob");
    let any = column(&h, &rows, "protects_somewhere");
    for (a, p) in a.iter().zip(any) {
        if a.parse::<f64>().unwrap() == 0.0 {
            assert_eq!(p, "false");
        }
    }
}
