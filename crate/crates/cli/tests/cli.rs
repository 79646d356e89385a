use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn trackkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trackkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "simulate",
        "--out-dir",
        p(dir),
        "--frames",
        "40",
        "--targets",
        "4",
        "--seed",
        "11",
    ];
    args.extend_from_slice(extra);
    let o = trackkit(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn noiseless_pipeline_scores_perfectly() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, &[]);
    let res = d.join("res.txt");
    let o = trackkit(&[
        "track",
        "--dets",
        p(&d.join("dets.txt")),
        "--embs",
        p(&d.join("embs.jdeb")),
        "--out",
        p(&res),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let csv = d.join("report.csv");
    let o = trackkit(&["eval", "--gt", p(&d.join("gt.txt")), "--res", p(&res), "--csv", p(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["MOTA", "IDF1", "MT", "ML", "IDs", "FP", "FN"]);
    let row: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(row, ["1.000", "1.000", "4", "0", "0", "0", "0"]);
    let csv = fs::read_to_string(csv).unwrap();
    assert!(csv.starts_with("MOTA,IDF1,MT,ML,IDs,FP,FN\n1.000000,1.000000,4,0,0,0,0"));
}

#[test]
fn motion_only_runs_without_embeddings() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, &[]);
    let res = d.join("res.txt");
    let o = trackkit(&[
        "track",
        "--dets",
        p(&d.join("dets.txt")),
        "--out",
        p(&res),
        "--motion-only",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!fs::read_to_string(res).unwrap().is_empty());
}

#[test]
fn embeddings_required_without_motion_only() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, &[]);
    let o = trackkit(&["track", "--dets", p(&d.join("dets.txt")), "--out", p(&d.join("r.txt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--embs"));
}

#[test]
fn tracking_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(
        d,
        &[
            "--p-miss",
            "0.1",
            "--fp-rate",
            "1",
            "--jitter",
            "2",
            "--embed-noise",
            "0.1",
        ],
    );
    let run = |name: &str| {
        let out = d.join(name);
        let o = trackkit(&[
            "track",
            "--dets",
            p(&d.join("dets.txt")),
            "--embs",
            p(&d.join("embs.jdeb")),
            "--out",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out).unwrap()
    };
    assert_eq!(run("a.txt"), run("b.txt"));
}

#[test]
fn missing_file_exits_2() {
    let tmp = TempDir::new().unwrap();
    let o = trackkit(&[
        "track",
        "--dets",
        p(&tmp.path().join("absent.txt")),
        "--out",
        p(&tmp.path().join("r.txt")),
        "--motion-only",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = trackkit(&[
        "eval",
        "--gt",
        p(&tmp.path().join("absent.txt")),
        "--res",
        p(&tmp.path().join("absent.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn embedding_count_mismatch_exits_2() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    simulate(&a, &[]);
    let o = trackkit(&["simulate", "--out-dir", p(&b), "--frames", "10", "--targets", "2"]);
    assert!(o.status.success());
    let o = trackkit(&[
        "track",
        "--dets",
        p(&a.join("dets.txt")),
        "--embs",
        p(&b.join("embs.jdeb")),
        "--out",
        p(&tmp.path().join("r.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("160 detection rows but 20 embeddings"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn corrupt_embedding_file_exits_2() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, &[]);
    let embs = d.join("embs.jdeb");
    let mut bytes = fs::read(&embs).unwrap();
    bytes[0] = b'X';
    fs::write(&embs, bytes).unwrap();
    let o = trackkit(&[
        "track",
        "--dets",
        p(&d.join("dets.txt")),
        "--embs",
        p(&embs),
        "--out",
        p(&d.join("r.txt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"));
}

#[test]
fn unparsable_row_reports_its_line() {
    let tmp = TempDir::new().unwrap();
    let dets = tmp.path().join("dets.txt");
    fs::write(&dets, "1,-1,10,10,20,60,0.9,-1,-1,-1\n1,-1,ten,10,20,60,0.9,-1,-1,-1\n").unwrap();
    let o = trackkit(&[
        "track",
        "--dets",
        p(&dets),
        "--out",
        p(&tmp.path().join("r.txt")),
        "--motion-only",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn hand_built_fixture_report() {
    let tmp = TempDir::new().unwrap();
    let gt = tmp.path().join("gt.txt");
    let res = tmp.path().join("res.txt");
    fs::write(
        &gt,
        "1,1,0,0,10,30,1,-1,-1,-1\n2,1,2,0,10,30,1,-1,-1,-1\n3,1,4,0,10,30,1,-1,-1,-1\n",
    )
    .unwrap();
    // hypothesis switches from id 5 to id 6 on the last frame
    fs::write(
        &res,
        "1,5,0,0,10,30,1,-1,-1,-1\n2,5,2,0,10,30,1,-1,-1,-1\n3,6,4,0,10,30,1,-1,-1,-1\n",
    )
    .unwrap();
    let o = trackkit(&["eval", "--gt", p(&gt), "--res", p(&res)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row: Vec<String> = stdout(&o)
        .lines()
        .nth(1)
        .unwrap()
        .split_whitespace()
        .map(String::from)
        .collect();
    // MOTA 1 - 1/3; IDF1 2*2 / (2*2 + 1 + 1)
    assert_eq!(row, ["0.667", "0.667", "1", "0", "1", "0", "0"]);
}

#[test]
fn frame_range_mismatch_warns_and_uses_intersection() {
    let tmp = TempDir::new().unwrap();
    let gt = tmp.path().join("gt.txt");
    let res = tmp.path().join("res.txt");
    fs::write(
        &gt,
        "1,1,0,0,10,30,1,-1,-1,-1\n2,1,2,0,10,30,1,-1,-1,-1\n3,1,4,0,10,30,1,-1,-1,-1\n",
    )
    .unwrap();
    fs::write(&res, "2,9,2,0,10,30,1,-1,-1,-1\n3,9,4,0,10,30,1,-1,-1,-1\n").unwrap();
    let o = trackkit(&["eval", "--gt", p(&gt), "--res", p(&res)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    assert!(stdout(&o).lines().nth(1).unwrap().trim_start().starts_with("1.000"));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    simulate(d, &[]);
    let cfg = d.join("tracker.cfg");
    fs::write(&cfg, "# motion only via config\nmotion-only = true\nlambda = 0.5\n").unwrap();
    // motion-only from the config file means no embeddings are needed
    let o = trackkit(&[
        "track",
        "--dets",
        p(&d.join("dets.txt")),
        "--out",
        p(&d.join("r.txt")),
        "--config",
        p(&cfg),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    // a bad flag value overrides the valid file value and is rejected
    let o = trackkit(&[
        "track",
        "--dets",
        p(&d.join("dets.txt")),
        "--out",
        p(&d.join("r.txt")),
        "--config",
        p(&cfg),
        "--lambda",
        "1.5",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda"), "{}", stderr(&o));

    fs::write(&cfg, "speed = 3\n").unwrap();
    let o = trackkit(&[
        "track",
        "--dets",
        p(&d.join("dets.txt")),
        "--out",
        p(&d.join("r.txt")),
        "--config",
        p(&cfg),
        "--motion-only",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("speed"));
}

#[test]
fn bench_prints_stage_breakdown_per_density() {
    let o = trackkit(&["bench", "--densities", "5,10", "--frames", "30", "--embed-dim", "16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    for stage in ["predict%", "cost%", "assign%", "update%"] {
        assert!(lines[0].contains(stage));
    }
    assert!(lines[1].trim_start().starts_with("5 "));
    assert!(lines[2].trim_start().starts_with("10 "));
    let frames_and_dets = |s: &str| {
        s.split_whitespace()
            .skip(1)
            .take(2)
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let again = stdout(&trackkit(&[
        "bench",
        "--densities",
        "5,10",
        "--frames",
        "30",
        "--embed-dim",
        "16",
    ]));
    let again: Vec<&str> = again.lines().collect();
    assert_eq!(frames_and_dets(lines[1]), frames_and_dets(again[1]));
    assert_eq!(frames_and_dets(lines[2]), frames_and_dets(again[2]));
}

#[test]
fn losses_check_reports_every_section() {
    let o = trackkit(&["losses-check", "--batches", "500", "--grad-points", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for key in ["ordering", "hardest-negative", "equivalence", "gradients"] {
        assert!(out.contains(key), "{out}");
    }
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(trackkit(&["track"]).status.code(), Some(2));
    assert_eq!(trackkit(&["bench", "--densities", "0"]).status.code(), Some(2));
    assert_eq!(
        trackkit(&["simulate", "--out-dir", "/tmp/x", "--p-miss", "1.5"])
            .status
            .code(),
        Some(2)
    );
}
