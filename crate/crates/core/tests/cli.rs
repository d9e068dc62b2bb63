use std::process::Command;

fn psybench(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_psybench")).args(args).output().unwrap();
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn report_from_fixtures() {
    let (ok, out, err) = psybench(&["report", "--shape", "ablation", "--verify"]);
    assert!(ok, "{err}");
    assert!(out.contains("Full (no removal)"));
    assert!(out.contains("IS block: mean drop 8.94, median drop 7.52 (n=4)"));
    let (ok, out, _) = psybench(&["report", "--shape", "sft_dpo", "--jsonl"]);
    assert!(ok);
    assert_eq!(out.lines().count(), 6);
    let (ok, _, err) = psybench(&["report", "--shape", "pie_chart"]);
    assert!(!ok);
    assert!(err.contains("unknown shape"));
}

#[test]
fn parse_prints_mapping() {
    let (ok, out, _) = psybench(&["parse", "--text", "O: 120, C: -5, E: 50, A: 50, N: 50"]);
    assert!(ok);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["mapping"]["kind"], "unknown->percentile_clipped");
    assert_eq!(v["traits"]["o"], 100.0);
    let (ok, _, err) = psybench(&["parse", "--text", "nothing to see"]);
    assert!(!ok);
    assert!(err.contains("unparsable"));
}

#[test]
fn losscheck_passes() {
    let (ok, out, _) = psybench(&["losscheck", "--instances", "10"]);
    assert!(ok, "{out}");
    assert_eq!(out.lines().filter(|l| l.contains("PASS")).count(), 2);
}

#[test]
fn ablate_against_stub() {
    let (ok, out, err) = psybench(&["ablate", "--stub", "--remove", "socctx", "--n-configs", "20", "--seed", "3"]);
    assert!(ok, "{err}");
    assert!(out.contains("Socioeconomic Context"));
    assert!(out.contains("IS block"));
    let (ok, _, err) = psybench(&["ablate", "--stub", "--remove", "nonsense"]);
    assert!(!ok);
    assert!(err.contains("known components"));
}

#[test]
fn generate_then_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let (ok, stdout, err) = psybench(&[
        "generate", "--stub", "--out", out_s, "--n-configs", "16", "--eval-configs", "10", "--quota", "4",
        "--families", "role_play,self_description",
    ]);
    assert!(ok, "{err}");
    assert!(err.contains("planned 160"), "{err}");
    assert!(stdout.contains("evaluation"));
    let pairs = dir.path().join("pairs.jsonl");
    let (ok, _, err) = psybench(&[
        "pairs", "--corpus", out.join("corpus").to_str().unwrap(), "--out", pairs.to_str().unwrap(),
    ]);
    assert!(ok, "{err}");
    assert!(pairs.exists());
}
