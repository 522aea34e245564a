use std::path::Path;
use std::process::{Command, Output};

use ctf_core::{load_codebook, EvalReport, Rankings, SearchMode, ThresholdSet};

fn ctf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run ctf")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = ctf(dir, args);
    assert!(
        out.status.success(),
        "ctf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_data(dir: &Path) {
    ok(
        dir,
        &[
            "gen",
            "--out",
            "g.ctfc",
            "--queries-out",
            "q.ctfc",
            "--ids",
            "120",
            "--seed",
            "1",
        ],
    );
    ok(
        dir,
        &[
            "gen",
            "--out",
            "v.ctfc",
            "--ids",
            "80",
            "--queries-per-id",
            "0",
            "--seed",
            "2",
        ],
    );
}

#[test]
fn gen_calibrate_search_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    let g = load_codebook(d.join("g.ctfc")).unwrap();
    assert_eq!(g.n_items(), 1200);
    assert_eq!(load_codebook(d.join("q.ctfc")).unwrap().n_items(), 120);

    ok(
        d,
        &[
            "calibrate",
            "--codebook",
            "v.ctfc",
            "--beta",
            "2",
            "--out",
            "t.json",
        ],
    );
    let t = ThresholdSet::load_json(d.join("t.json")).unwrap();
    assert_eq!(t.lengths, g.schedule.lengths());
    assert_eq!(t.beta, Some(2.0));

    ok(
        d,
        &[
            "search",
            "--codebook",
            "g.ctfc",
            "--queries",
            "q.ctfc",
            "--thresholds",
            "t.json",
            "--out",
            "r.json",
        ],
    );
    let r = Rankings::load_json(d.join("r.json")).unwrap();
    assert_eq!(r.results.len(), 120);
    assert!(matches!(r.mode, SearchMode::Cascade(_)));
    for res in &r.results {
        let mut o = res.order.clone();
        o.sort_unstable();
        assert!(o.iter().enumerate().all(|(i, &x)| x as usize == i));
    }

    let out = ok(
        d,
        &[
            "eval",
            "--codebook",
            "g.ctfc",
            "--queries",
            "q.ctfc",
            "--rankings",
            "r.json",
            "--cmc-depth",
            "5",
        ],
    );
    let report: EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.cmc.len(), 5);
    assert_eq!(report.thresholds, Some(t.thresholds.clone()));
    assert_eq!(report.evaluated_queries + report.skipped_queries, 120);
    assert!(report.rank1 > 0.9);
}

#[test]
fn pass_through_cascade_matches_full_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    let g = load_codebook(d.join("g.ctfc")).unwrap();
    ThresholdSet::pass_through(&g.schedule)
        .save_json(d.join("pass.json"))
        .unwrap();
    ok(
        d,
        &[
            "search",
            "--codebook",
            "g.ctfc",
            "--queries",
            "q.ctfc",
            "--thresholds",
            "pass.json",
            "--out",
            "c.json",
        ],
    );
    ok(
        d,
        &[
            "search",
            "--codebook",
            "g.ctfc",
            "--queries",
            "q.ctfc",
            "--level",
            "4",
            "--parallel",
            "--out",
            "f.json",
        ],
    );
    let c = Rankings::load_json(d.join("c.json")).unwrap();
    let f = Rankings::load_json(d.join("f.json")).unwrap();
    assert!(f.parallel && !c.parallel);
    for (a, b) in c.results.iter().zip(&f.results) {
        assert_eq!(a.order, b.order);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    let code = |args: &[&str]| ctf(d, args).status.code().unwrap();

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(
        code(&["calibrate", "--codebook", "v.ctfc", "--beta", "0"]),
        1
    );
    assert_eq!(
        code(&[
            "search",
            "--codebook",
            "g.ctfc",
            "--queries",
            "q.ctfc",
            "--out",
            "x.json"
        ]),
        1
    );

    std::fs::write(d.join("bad.ctfc"), b"XXXX0000000000000000").unwrap();
    assert_eq!(code(&["calibrate", "--codebook", "bad.ctfc"]), 2);
    assert_eq!(code(&["calibrate", "--codebook", "missing.ctfc"]), 2);
    std::fs::write(d.join("bad.json"), b"{").unwrap();
    assert_eq!(
        code(&[
            "search",
            "--codebook",
            "g.ctfc",
            "--queries",
            "q.ctfc",
            "--thresholds",
            "bad.json",
            "--out",
            "x.json"
        ]),
        2
    );

    assert_eq!(
        code(&[
            "search",
            "--codebook",
            "g.ctfc",
            "--queries",
            "q.ctfc",
            "--level",
            "5",
            "--out",
            "x.json"
        ]),
        3
    );
    ok(
        d,
        &[
            "search",
            "--codebook",
            "g.ctfc",
            "--queries",
            "q.ctfc",
            "--level",
            "1",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(
        code(&[
            "eval",
            "--codebook",
            "g.ctfc",
            "--queries",
            "g.ctfc",
            "--rankings",
            "r.json"
        ]),
        3
    );
    assert_eq!(
        code(&["gen", "--out", "x.ctfc", "--flip", "0.6,0.1,0.1,0.1"]),
        3
    );
    assert_eq!(
        code(&[
            "gen",
            "--out",
            "x.ctfc",
            "--ids",
            "100000",
            "--max-gallery-bytes",
            "1000"
        ]),
        3
    );
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "bench",
            "sort-scaling",
            "--sizes",
            "1000,2000",
            "--sort-length",
            "64",
            "--reps",
            "2",
            "--out",
            "s.csv",
        ],
    );
    let mut rdr = csv::Reader::from_path(d.join("s.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(&headers[0], "experiment");
    let rows: Vec<_> = rdr.records().map(Result::unwrap).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| &r[0] == "sort-scaling"));

    let out = ok(
        d,
        &[
            "bench",
            "beta-sweep",
            "--sizes",
            "2000",
            "--n-queries",
            "20",
            "--betas",
            "0.5,2",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text
        .lines()
        .any(|l| l.contains("beta-sweep") && l.contains("mean_query_time")));
}
