use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_infoseeker"))
}

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").canonicalize().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_restaurants(config: &Path, extra: &[&str]) -> Output {
    bin()
        .args(["run", "--task", "Ten Sapporo ramen shops as a table", "--virtual-clock", "--config"])
        .arg(config)
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn run_prints_only_the_answer() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let o = run_restaurants(&scenarios().join("restaurants/engine.toml"), &["--trace-out", trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let golden = std::fs::read_to_string(scenarios().join("restaurants/golden/answer.md")).unwrap();
    assert_eq!(stdout(&o), golden);

    let v = bin().args(["trace", "verify"]).arg(&trace).output().unwrap();
    assert_eq!(v.status.code(), Some(0), "{}", stdout(&v));
}

#[test]
fn run_config_errors_exit_2() {
    let o = run_restaurants(Path::new("/nonexistent/engine.toml"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot read"), "{}", stderr(&o));

    let o = run_restaurants(&scenarios().join("restaurants/engine.toml"), &["--max-steps", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("step_limit"), "{}", stderr(&o));

    let o = run_restaurants(&scenarios().join("restaurants/engine.toml"), &["--workers", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_over_stdio_tool_servers() {
    let src = scenarios().join("restaurants");
    let text = std::fs::read_to_string(src.join("engine.toml")).unwrap();
    let me = env!("CARGO_BIN_EXE_infoseeker");
    let stdio = |fixture: &str| {
        format!(
            "tools = {{ kind = \"stdio\", command = \"{me}\", args = [\"mock-tool-server\", \"--fixture\", \"{}\"] }}",
            src.join(fixture).display()
        )
    };
    let text = text
        .replace("script = \"script.json\"", &format!("script = \"{}\"", src.join("script.json").display()))
        .replace("tools = { kind = \"mock\", fixture = \"tools/search.json\" }", &stdio("tools/search.json"))
        .replace("tools = { kind = \"mock\", fixture = \"tools/browser.json\" }", &stdio("tools/browser.json"));
    assert!(text.contains("kind = \"stdio\""));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("engine.toml");
    std::fs::write(&cfg, text).unwrap();

    let o = run_restaurants(&cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let golden = std::fs::read_to_string(src.join("golden/answer.md")).unwrap();
    assert_eq!(stdout(&o), golden);
}

#[test]
fn scenario_pass_and_sweep() {
    let o = bin().arg("scenario").arg(scenarios().join("scaling")).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    let o = bin()
        .arg("scenario")
        .arg(scenarios().join("scaling"))
        .args(["--sweep", "17,1,2,4,8,16"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let rows: Vec<Vec<String>> = stdout(&o)
        .lines()
        .skip_while(|l| !l.trim_start().starts_with("workers"))
        .skip(1)
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect();
    let budgets: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(budgets, ["1", "2", "4", "8", "16", "17"]);
    assert_eq!(rows[0][1], "17.0000");
    assert_eq!(rows[5][1], "1.0000");
    assert_eq!(rows[5][2], "17.0000");
}

#[test]
fn scenario_failure_and_invalid_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let engine = scenarios().join("scaling/engine.toml");
    std::fs::write(
        dir.path().join("scenario.toml"),
        format!(
            "name = \"broken\"\ntask_id = \"broken\"\nquery = \"hours\"\nconfig = \"{}\"\n\n[overrides]\nworkers = 17\n\n[expect]\nmakespan = 3.0\n",
            engine.display()
        ),
    )
    .unwrap();
    let o = bin().arg("scenario").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("[FAIL] makespan: got 1.0, want 3.0"), "{}", stdout(&o));
    assert!(stdout(&o).contains("[pass] trace verifier"));

    std::fs::write(dir.path().join("scenario.toml"), "name = 3\n").unwrap();
    let o = bin().arg("scenario").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn trace_summarize_and_verify() {
    let golden = scenarios().join("restaurants/golden/trace.jsonl");
    let o = bin().args(["trace", "summarize"]).arg(&golden).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let steps = stdout(&o).lines().find(|l| l.starts_with("total steps")).unwrap().to_string();
    assert_eq!(steps.split_whitespace().last(), Some("2"));

    let o = bin().args(["trace", "verify"]).arg(&golden).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    // Copy a tool sentinel into a manager summary.
    let text = std::fs::read_to_string(&golden).unwrap();
    let at = text.find("SENTINEL-").unwrap();
    let sentinel = &text[at..at + "SENTINEL-".len() + 12];
    let leaked = text.replacen("\"summary\":\"Merged", &format!("\"summary\":\"{sentinel} Merged"), 1);
    assert_ne!(leaked, text);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("leak.jsonl");
    std::fs::write(&bad, leaked).unwrap();
    let o = bin().args(["trace", "verify"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("violation [isolation]"), "{}", stdout(&o));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    for action in ["summarize", "verify"] {
        let o = bin().args(["trace", action]).arg(&empty).output().unwrap();
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains("truncated trace"), "{}", stderr(&o));
    }
}
