use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slider_forge::image_io::decode_png;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_slider-forge"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(out.status.code(), Some(1), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

/// Writes a config that trains `name` for a few steps into `dir`.
fn config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let ck = dir.join(format!("{name}.sfck"));
    let text = format!(
        "[concept]\nname = \"{name}\"\n\n[training]\nsteps = 60\noutput = \"{}\"\n\n[eval]\nseeds = [1, 2]\nprobe_steps = 20\nprobe_repeats = 1\n{extra}",
        ck.display()
    );
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_and_history_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = config(dir, "brightness", "");
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let stdout = ok(&["train", "--config", s(&cfg)]);
        assert!(stdout.contains("checkpoint:") && stdout.contains("history:") && stdout.contains("final step 60"));
        let ck = std::fs::read(dir.join("brightness.sfck")).unwrap();
        let history = std::fs::read_to_string(dir.join("brightness.sfck.history.csv")).unwrap();
        assert_eq!(history.lines().count(), 61);
        bytes.push((ck, history));
    }
    assert!(bytes[0] == bytes[1], "reruns must be byte-identical");
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (body, key) in [
        ("[schedule]\nsteepness = 0.0\n", "schedule.steepness"),
        ("[schedule]\nsteepness = -0.5\n", "schedule.steepness"),
        ("[training]\nsteps = 0\n", "training.steps"),
    ] {
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, body).unwrap();
        let err = fail(&["train", "--config", s(&path)]);
        assert!(err.starts_with("error:") && err.contains(key), "{err}");
    }
    let path = dir.path().join("typo.toml");
    std::fs::write(&path, "[model]\nchanels = 3\n").unwrap();
    let err = fail(&["train", "--config", s(&path)]);
    assert!(err.contains("chanels") && err.contains("line 2"), "{err}");
}

#[test]
fn generate_composes_sliders_in_any_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a_cfg = config(d, "a", "");
    let b_cfg = config(d, "b", "[lora]\nrank = 1\n");
    ok(&["train", "--config", s(&a_cfg)]);
    ok(&["train", "--config", s(&b_cfg)]);
    let (a, b) = (d.join("a.sfck"), d.join("b.sfck"));
    let gen = |out: &str, sliders: &[&str]| {
        let out = d.join(out);
        let mut args = vec!["generate", "--config", s(&a_cfg), "--checkpoint", s(&a), "--checkpoint", s(&b)];
        args.extend(["--prompt", "neutral", "--seed", "11", "--out", s(&out)]);
        for sl in sliders {
            args.extend(["--slider", sl]);
        }
        ok(&args);
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        (read("base.png"), read("edited.png"))
    };

    let (base, edited) = gen("none", &[]);
    assert_eq!(base, edited, "no sliders means edited equals base");

    let (base_up, up) = gen("up", &["a:1.5"]);
    assert_eq!(base_up, base);
    assert!(decode_png(&up).unwrap().mean() > decode_png(&base).unwrap().mean());

    let (_, ab) = gen("ab", &["a:1", "b:1"]);
    let (_, ba) = gen("ba", &["b:1", "a:1"]);
    assert_eq!(ab, ba);
    let (_, neg) = gen("neg", &["a:-1.5"]);
    assert!(decode_png(&neg).unwrap().mean() < decode_png(&base).unwrap().mean());

    let common = ["generate", "--config", s(&a_cfg), "--checkpoint", s(&a), "--prompt", "neutral", "--seed", "1"];
    let out = d.join("x");
    let err = fail(&[&common[..], &["--out", s(&out), "--slider", "ghost:1"]].concat());
    assert!(err.contains("unknown slider `ghost`"), "{err}");
    let err = fail(&[&common[..], &["--out", s(&out), "--slider", "a:lots"]].concat());
    assert!(err.contains("unparsable scale"), "{err}");
}

#[test]
fn eval_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "brightness", "");
    ok(&["train", "--config", s(&cfg)]);
    let ck = d.join("brightness.sfck");

    let mut runs = Vec::new();
    for out in ["r1", "r2"] {
        let out = d.join(out);
        ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&out)]);
        let txt = std::fs::read_to_string(out.join("brightness.eval.txt")).unwrap();
        let json = std::fs::read_to_string(out.join("brightness.eval.json")).unwrap();
        runs.push((txt, json));
    }
    assert_eq!(runs[0], runs[1]);
    let txt = &runs[0].0;
    assert!(txt.contains("Category | Weight"), "{txt}");
    assert_eq!(txt.lines().filter(|l| l.starts_with("toy")).count(), 5);
    assert!(!txt.contains("timestamp"));

    // A grid of only alpha = 0 gives an all-zero LPIPS column.
    let zero = config(d, "brightness", "alphas = [0.0]\n");
    let out = d.join("zero");
    ok(&["eval", "--config", s(&zero), "--checkpoint", s(&ck), "--out", s(&out)]);
    let report = std::fs::read_to_string(out.join("brightness.eval.txt")).unwrap();
    let rows: Vec<&str> = report.lines().filter(|l| l.starts_with("toy")).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].trim_end().ends_with("| 0.000"), "{}", rows[0]);
}

#[test]
fn eval_rejects_incompatible_checkpoint_with_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "brightness", "");
    ok(&["train", "--config", s(&cfg)]);
    let other = d.join("other.toml");
    std::fs::write(&other, "[model]\nhidden = 6\n").unwrap();
    let err = fail(&["eval", "--config", s(&other), "--checkpoint", s(&d.join("brightness.sfck")), "--out", s(d)]);
    let ck = slider_forge::trainer::load_checkpoint(&d.join("brightness.sfck")).unwrap();
    let current = slider_forge::config::AppConfig::load(&other).unwrap().model_hash();
    assert!(err.contains(&ck.meta.model_hash) && err.contains(&current), "{err}");

    let err = fail(&["eval", "--config", s(&cfg), "--out", s(d)]);
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn ablation_writes_four_arm_reports_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "brightness", "alphas = [1.0]\n");
    let out = d.join("ablation");
    ok(&["eval", "--config", s(&cfg), "--ablation", "--out", s(&out)]);
    for stem in ["ablation-w-o-adv", "ablation-w-o-perp", "ablation-w-o-adv-perp", "ablation-full", "ablation-summary"] {
        assert!(out.join(format!("{stem}.txt")).is_file(), "{stem}.txt missing");
        assert!(out.join(format!("{stem}.json")).is_file(), "{stem}.json missing");
    }
    let summary = std::fs::read_to_string(out.join("ablation-summary.txt")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.starts_with("ablation |")).count(), 4, "{summary}");
    assert!(summary.contains("34.89") && summary.contains("not reproducible"));
}

#[test]
fn serve_answers_over_tcp_and_reports_busy_port() {
    use std::io::{Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::time::{Duration, Instant};

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, "brightness", &format!("\n[serve]\ncheckpoint_dir = \"{}\"\n", d.display()));
    ok(&["train", "--config", s(&cfg)]);
    std::fs::write(d.join("broken.sfck"), b"not a checkpoint").unwrap();

    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let err = fail(&["serve", "--config", s(&cfg), "--port", &port]);
    assert!(err.to_lowercase().contains("address"), "{err}");
    drop(busy);

    let free = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = bin().args(["serve", "--config", s(&cfg), "--port", &free.to_string()]).spawn().unwrap();
    let deadline = Instant::now() + Duration::from_secs(60);
    let body = loop {
        if let Ok(mut stream) = TcpStream::connect(("127.0.0.1", free)) {
            stream.write_all(b"GET /api/sliders HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
            let mut text = String::new();
            stream.read_to_string(&mut text).unwrap();
            break text;
        }
        assert!(Instant::now() < deadline, "service did not start");
        std::thread::sleep(Duration::from_millis(100));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    // The malformed archive is skipped; only the trained slider is listed.
    assert!(body.contains("\"name\":\"brightness\"") && !body.contains("broken"), "{body}");
}
