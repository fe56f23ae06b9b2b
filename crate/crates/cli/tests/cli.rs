use std::path::Path;
use std::process::{Command, Output};

use tubekit::dataio::{read_report, read_tubes};
use tubekit::metrics::{MetricKind, Threshold};

fn tubekit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tubekit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn synth_link_predict_eval_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        "manifest = \"data/manifest.json\"\ndetections = \"data/detections.jsonl\"\npct_list = [20, 60, 100]\n\n[synth]\nvideos = 4\nactors = 2\nclasses = 3\n",
    )
    .unwrap();
    let cfg = ["--config", "run.toml"];

    ok(&tubekit(
        d,
        &[&cfg[..], &["synth", "--out", "data"]].concat(),
    ));
    assert!(d.join("data/manifest.json").exists());

    ok(&tubekit(
        d,
        &[&cfg[..], &["link", "--pct", "50", "--out", "linked.json"]].concat(),
    ));
    let linked = read_tubes(d.join("linked.json")).unwrap();
    assert_eq!(linked.videos.len(), 4);
    assert!(linked
        .videos
        .iter()
        .all(|v| v.tubes.iter().all(|t| t.predicted.is_empty())));

    ok(&tubekit(
        d,
        &[&cfg[..], &["predict", "--pct", "50", "--out", "full.json"]].concat(),
    ));
    let full = read_tubes(d.join("full.json")).unwrap();
    for v in &full.videos {
        assert_eq!(v.tubes.len(), 2);
        for t in &v.tubes {
            assert_eq!(
                t.predicted.keys().copied().collect::<Vec<_>>(),
                (v.observed + 1..=v.num_frames).collect::<Vec<_>>()
            );
        }
    }

    let stdout = ok(&tubekit(
        d,
        &[&cfg[..], &["eval", "--out", "report.csv"]].concat(),
    ));
    assert!(stdout.contains("detection-map@0.50: 1.0000"), "{stdout}");
    let rows = read_report(d.join("report.csv")).unwrap();
    let pcts: std::collections::BTreeSet<u32> = rows.iter().map(|r| r.observed_pct).collect();
    assert_eq!(pcts, [20, 60, 100].into());
    assert!(rows
        .iter()
        .any(|r| r.metric == MetricKind::CMap && r.threshold == Threshold::Average));

    // Flags override the config file.
    ok(&tubekit(
        d,
        &[
            &cfg[..],
            &[
                "--pct-list",
                "50,100",
                "sweep",
                "a=data/detections.jsonl",
                "b=data/detections.jsonl",
                "--out",
                "sweep.csv",
            ],
        ]
        .concat(),
    ));
    let text = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    let body: Vec<&str> = text.lines().skip(1).collect();
    // Per model: 2 accuracy + 8 online-map + 4 p-map + 8 c-map.
    assert_eq!(body.len(), 2 * 22);
    assert!(body
        .iter()
        .all(|l| l.starts_with("a,") || l.starts_with("b,")));
    // Zero-noise synthetic data completes perfectly.
    let cmap: Vec<&str> = body
        .iter()
        .copied()
        .filter(|l| l.contains(",c-map,"))
        .collect();
    assert_eq!(cmap.len(), 2 * 8);
    assert!(cmap.iter().all(|l| l.ends_with(",1")), "{cmap:?}");
}

#[test]
fn check_loss_reports_success() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&tubekit(
        dir.path(),
        &["check-loss", "--trials", "200", "--seed", "5"],
    ));
    assert!(out.trim_end().ends_with("ok"));
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = tubekit(dir.path(), &["eval", "--out", "r.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing manifest"));

    std::fs::write(dir.path().join("bad.toml"), "nms = \"high\"\n").unwrap();
    let out = tubekit(dir.path(), &["--config", "bad.toml", "check-loss"]);
    assert_eq!(out.status.code(), Some(2));

    let out = tubekit(dir.path(), &["--horizon", "1,0,3", "check-loss"]);
    assert!(!out.status.success());
}
