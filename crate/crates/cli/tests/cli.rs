use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn tracesim() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tracesim"));
    c.env("RUST_LOG", "warn");
    c
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn field<'a>(stdout: &'a str, prefix: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(prefix))
        .unwrap_or_else(|| panic!("no `{prefix}` line in:\n{stdout}"))
        .trim()
}

fn gen(dir: &Path, seed: u64, rate: f64) {
    ok(tracesim()
        .args(["gen", "--nodes", "20", "--tasks", "200", "--duration-micros", "7200000000"])
        .args(["--seed", &seed.to_string(), "--anomaly-rate", &rate.to_string(), "--out"])
        .arg(dir)
        .output()
        .unwrap());
}

#[test]
fn compiled_replay_matches_direct_run() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace");
    let log = dir.path().join("events.tslog");
    gen(&trace, 3, 0.05);

    let compiled = ok(tracesim().args(["compile", "--trace"]).arg(&trace).arg("--out").arg(&log).output().unwrap());
    assert!(compiled.starts_with("compiled "));

    let direct = ok(tracesim().args(["run", "--speed", "0", "--trace"]).arg(&trace).output().unwrap());
    let replay = ok(tracesim()
        .args(["replay", "--speed", "0", "--log"])
        .arg(&log)
        .arg("--expect-trace")
        .arg(&trace)
        .output()
        .unwrap());
    assert_eq!(field(&direct, "snapshot "), field(&replay, "snapshot "));
    assert_eq!(field(&direct, "anomalies "), field(&replay, "anomalies "));
    assert_ne!(field(&direct, "anomalies "), "0");
}

#[test]
fn replay_refuses_a_log_from_another_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen(&a, 1, 0.0);
    gen(&b, 2, 0.0);
    let log = dir.path().join("a.tslog");
    ok(tracesim().args(["compile", "--trace"]).arg(&a).arg("--out").arg(&log).output().unwrap());
    let out = tracesim()
        .args(["replay", "--speed", "0", "--log"])
        .arg(&log)
        .arg("--expect-trace")
        .arg(&b)
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn shadow_schedulers_leave_the_digest_alone() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 0.0);
    let run = |greedy: &str| {
        let out = ok(tracesim().args(["run", "--speed", "0", "--greedy", greedy, "--trace"]).arg(dir.path()).output().unwrap());
        field(&out, "snapshot ").to_owned()
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn control_a_paced_run() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 5, 0.0);
    let snap = dir.path().join("mid.snap");
    let mut child = tracesim()
        .args(["run", "--speed", "1", "--listen", "127.0.0.1:0", "--trace"])
        .arg(dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.strip_prefix("listening on ").expect("address line").to_owned();

    let ctl = |args: &[&str]| ok(tracesim().args(["ctl", "--endpoint", &addr]).args(args).output().unwrap());
    // pause is refused until loading has finished
    let paused = (0..200).any(|_| {
        let out = tracesim().args(["ctl", "--endpoint", &addr, "pause"]).output().unwrap();
        out.status.success() || {
            std::thread::sleep(std::time::Duration::from_millis(25));
            false
        }
    });
    assert!(paused);
    assert!(ctl(&["stats"]).contains("\"type\":\"stats\""));
    assert!(ctl(&["snapshot", snap.to_str().unwrap()]).contains("\"ok\":true"));
    assert!(snap.exists());
    let refused = tracesim().args(["ctl", "--endpoint", &addr, "speed", "--", "-1"]).output().unwrap();
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stdout).contains("\"ok\":false"));
    ctl(&["speed", "1000000"]);
    ctl(&["resume"]);

    let rest: Vec<String> = lines.map(Result::unwrap).collect();
    assert!(child.wait().unwrap().success());
    assert!(rest.iter().any(|l| l.starts_with("snapshot ")), "{rest:?}");
}
