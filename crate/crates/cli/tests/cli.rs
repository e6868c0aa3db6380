use std::fs;
use std::process::{Command, Output};

use llsa::tensorio::{gen_random, write_tensor, Distribution};

fn llsa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llsa")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn verify_passes_with_defaults() {
    let o = llsa(&["verify", "--threads", "2"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    for check in ["forward-oracle", "transpose-roundtrip", "backward-oracle"] {
        assert!(text.contains(check), "{text}");
    }
}

#[test]
fn corrupted_index_fails_naming_the_check() {
    let o = llsa(&["verify", "--corrupt-index"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("transpose-roundtrip"), "{}", stderr(&o));
}

#[test]
fn verify_reads_tensors_and_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    for (i, name) in ["q.fmat", "k.fmat", "v.fmat"].iter().enumerate() {
        write_tensor(p(name), &gen_random(128, 8, i as u64, Distribution::StdNormal)).unwrap();
    }
    fs::write(
        p("run.cfg"),
        "# small run\nb = 2\nk = 3\nlevels = 3\nmode = logit-bias\n",
    )
    .unwrap();
    let dump = p("sel.txt");
    let o = llsa(&[
        "verify",
        "--config",
        p("run.cfg").to_str().unwrap(),
        "--q",
        p("q.fmat").to_str().unwrap(),
        "--k",
        p("k.fmat").to_str().unwrap(),
        "--v",
        p("v.fmat").to_str().unwrap(),
        "--dump-selection",
        dump.to_str().unwrap(),
        "--json",
    ]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["instances"][0], "files");
    let dumped = fs::read_to_string(dump).unwrap();
    assert!(dumped.starts_with("level 0 / row 0:"), "{dumped}");
    // 64 level-0 rows, 32 level-1 rows, 16 level-2 rows.
    assert_eq!(dumped.lines().count(), 64 + 32 + 16);
}

#[test]
fn invalid_configs_exit_with_a_usage_error() {
    let o = llsa(&["verify", "--top-k", "99"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("top-k"), "{}", stderr(&o));
    let o = llsa(&["verify", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_tiny_errors() {
    let o = llsa(&[
        "gradcheck",
        "--n",
        "32",
        "--d",
        "4",
        "--b",
        "2",
        "--top-k",
        "2",
        "--levels",
        "2",
        "--json",
    ]);
    if cfg!(feature = "single-precision") {
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("double-precision"), "{}", stderr(&o));
        return;
    }
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-6);
    assert_eq!(report["coordinates_checked"], 3 * 32 * 4);
}

#[test]
fn scaling_emits_csv_in_the_documented_column_order() {
    let o = llsa(&[
        "scaling",
        "--n-grid",
        "1024,100,2048",
        "--k",
        "4",
        "--runs",
        "1",
        "--warmup",
        "0",
        "--dense-grid",
        "256",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("n,phase,wall_ns,mul_accs,b,k,levels,enrich,mode,seed")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 3 + 1);
    assert!(rows.iter().all(|r| r.len() == 10 && r[2].parse::<u64>().unwrap() > 0));
    assert!(rows.iter().any(|r| r[1] == "dense_oracle"));
    assert!(stderr(&o).contains("skipping n=100"), "{}", stderr(&o));
    assert!(stderr(&o).contains("slope select"), "{}", stderr(&o));
}

#[test]
fn kv_backward_reports_per_token_times_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("kv.json");
    let o = llsa(&[
        "kv-backward",
        "--n-grid",
        "1024,2048",
        "--runs",
        "1",
        "--out",
        "json",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 4);
    let per_token = report["per_token"].as_array().unwrap();
    assert!(per_token.iter().any(|p| p["phase"] == "backward_kv_mask"));
    assert!(report["time_slopes"]["backward_kv"].is_number());

    let o = llsa(&["kv-backward", "--n-grid", "1024", "--runs", "1", "--baseline", "none"]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains("backward_kv_mask"));
}

#[test]
fn reorder_demo_prints_the_patch_order() {
    let o = llsa(&["reorder-demo", "--height", "4", "--width", "4", "--b", "4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let grid: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(grid[0].split_whitespace().collect::<Vec<_>>(), ["0", "1", "4", "5"]);
    assert_eq!(grid[1].split_whitespace().collect::<Vec<_>>(), ["2", "3", "6", "7"]);

    let o = llsa(&["reorder-demo", "--b", "8"]);
    assert_eq!(o.status.code(), Some(2));
}
