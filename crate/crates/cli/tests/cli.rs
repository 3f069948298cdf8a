use std::fs;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scs-patrol"));
    c.env_remove("SCS_PATROL_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn simulate_streams_ordered_records() {
    let o = run(&[
        "simulate",
        "--rows",
        "3",
        "-k",
        "4",
        "--duration",
        "5",
        "--seed",
        "2",
    ]);
    assert!(o.status.success());
    let lines: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let last = lines.last().unwrap();
    assert_eq!(last["type"], "end");
    assert_eq!(last["final_tick"], 20);
    let ticks: Vec<u64> = lines[..lines.len() - 1]
        .iter()
        .map(|l| l["tick"].as_u64().unwrap())
        .collect();
    assert!(ticks.windows(2).all(|w| w[0] <= w[1]));
    assert!(lines.iter().any(|l| l["type"] == "traversal"));
}

#[test]
fn invalid_configuration_exits_with_two() {
    for args in [
        &["simulate", "--rows", "3", "-k", "10"][..],
        &["simulate", "--strategy", "lazy"],
        &["simulate", "--p", "1.5"],
        &["simulate", "--meetings", "sometimes"],
        &["bounds", "-n", "10", "-k", "0"],
        &[
            "sweep",
            "--rows",
            "3",
            "--robots",
            "12",
            "--out",
            "/nonexistent-not-used",
        ],
        &["mixing", "--norm", "max"],
        &["broadcast", "--rows", "3", "-k", "1"],
        &["no-such-command"],
    ] {
        let o = run(args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn bounds_prints_one_object() {
    let o = run(&["bounds", "-n", "100", "-k", "3"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["idle_bound"], 100.0 / 3.0 + 1.0);
    assert_eq!(v["expected_visit_window"], 34);
    assert_eq!(v["isolation_bound"], 51);
    assert!(v["broadcast_regular_bound"].as_f64().unwrap() > 0.0);
}

#[test]
fn walking_graph_dump_reports_both_counts() {
    let o = run(&["walking-graph", "--rows", "4", "--cols", "2"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["vertex_count"], 2 * 8 + 4 + 2);
    assert_eq!(v["formula_vertex_count"], 4 * (4 + 2));
    assert_eq!(v["arc_count"], 32);
    assert_eq!(v["graph"]["arcs"].as_array().unwrap().len(), 32);
}

#[test]
fn dmg_and_mixing_outputs() {
    let o = run(&["dmg", "--rows", "2"]);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("i,j,c_ij,m_ij"));
    assert_eq!(lines.count(), 16);
    let o = run(&["mixing", "--grids", "5,10", "--norm", "frobenius"]);
    assert_eq!(stdout(&o), "n,t_mix,epsilon\n25,5,0.25\n100,18,0.25\n");
}

#[test]
fn sweep_uses_env_directory_and_compare_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args([
            "sweep",
            "--rows",
            "4",
            "--strategy",
            "random",
            "--robots",
            "1..4",
            "--metrics",
            "idle,isolation",
        ])
        .args(["--reps", "2"])
        .env("SCS_PATROL_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let idle = fs::read_to_string(dir.path().join("idle.csv")).unwrap();
    assert_eq!(idle.lines().count(), 5);
    assert!(dir.path().join("manifest.json").exists());

    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "compare",
        "--rows",
        "4",
        "--metrics",
        "idle,isolation",
        "--out",
        out,
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("grid,strategy,p,k,n,avg_idle,idle_bound,idle_gap,"));
    assert_eq!(text.lines().count(), 5);

    let o = run(&[
        "compare",
        "--rows",
        "4",
        "--robots",
        "7",
        "--metrics",
        "idle",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "compare",
        "--rows",
        "4",
        "--metrics",
        "broadcast",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sweep_accepts_a_plan_file() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    let out = dir.path().join("res");
    fs::write(
        &plan,
        serde_json::json!({
            "grids": [{"rows": 3, "cols": 3}],
            "strategies": [{"kind": "quasi-random", "p": 0.25}],
            "ks": [2, 3],
            "metrics": ["broadcast", "mixing"],
            "trials": 5,
            "out_dir": out,
        })
        .to_string(),
    )
    .unwrap();
    let o = run(&["sweep", "--plan", plan.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bc = fs::read_to_string(out.join("broadcast.csv")).unwrap();
    assert!(bc.contains("3x3,quasi-random,0.25,2,5,"));
    assert!(fs::read_to_string(out.join("mixing.csv"))
        .unwrap()
        .starts_with("grid,n,epsilon,t_mix\n3x3,9,0.25,"));
}

#[test]
fn broadcast_summary_matches_the_sweep_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&[
        "sweep",
        "--rows",
        "4",
        "--strategy",
        "random",
        "--robots",
        "3",
        "--metrics",
        "broadcast",
        "--out",
        out,
    ]);
    assert!(o.status.success());
    let swept = fs::read_to_string(dir.path().join("broadcast.csv")).unwrap();
    let o = run(&["broadcast", "--rows", "4", "-k", "3"]);
    assert_eq!(stdout(&o), swept);
}
