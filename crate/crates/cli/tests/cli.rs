use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: [&str; 10] = [
    "--set",
    "gpt.d_model=32",
    "--set",
    "gpt.heads=2",
    "--set",
    "gpt.layers=1",
    "--set",
    "gpt.batch_size=32",
    "--set",
    "gpt.base_lr=0.01",
];

fn pwlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwlm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Vec<u8> {
    let out = pwlm(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    model: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let split = root.join("split");
        ok(&[
            "split",
            "--synthetic",
            "--set",
            "synth.occurrences=600",
            "--out-dir",
            split.to_str().unwrap(),
        ]);
        let model = root.join("m.ckpt");
        let train = split.join("train.tsv");
        let mut args = vec![
            "train",
            "--train",
            train.to_str().unwrap(),
            "--epochs",
            "3",
            "--out",
            model.to_str().unwrap(),
        ];
        args.extend(TINY);
        ok(&args);
        Fixture {
            _dir: dir,
            root,
            model,
        }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn sampling_is_seeded_and_worker_independent() {
    let m = s(&fixture().model);
    let a = ok(&["sample", "--model", m, "--n", "3", "--seed", "7"]);
    let b = ok(&["sample", "--model", m, "--n", "3", "--seed", "7"]);
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 3);
    let c = ok(&[
        "sample",
        "--model",
        m,
        "--n",
        "3",
        "--seed",
        "7",
        "--workers",
        "3",
    ]);
    assert_eq!(a, c);
    assert_ne!(a, ok(&["sample", "--model", m, "--n", "3", "--seed", "8"]));
}

#[test]
fn guide_output_matches_template() {
    let out = ok(&[
        "guide",
        "--model",
        s(&fixture().model),
        "--template",
        "lllldd",
        "--n",
        "100",
        "--seed",
        "1",
    ]);
    let lines: Vec<&[u8]> = out
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .collect();
    assert_eq!(lines.len(), 100);
    for l in lines {
        assert_eq!(l.len(), 6, "{}", String::from_utf8_lossy(l));
        assert!(l[..4].iter().all(u8::is_ascii_lowercase));
        assert!(l[4..].iter().all(u8::is_ascii_digit));
    }
}

#[test]
fn score_reports_probability_entropy_and_strength() {
    let input = fixture().root.join("score_in.txt");
    std::fs::write(&input, "123456\n").unwrap();
    let out = String::from_utf8(ok(&[
        "score",
        "--model",
        s(&fixture().model),
        "--input",
        s(&input),
    ]))
    .unwrap();
    let mut lines = out.lines();
    assert_eq!(
        lines.next(),
        Some("password\tlog10_prob\tentropy_bits\tstrength")
    );
    let row: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert!(lines.next().is_none());
    assert_eq!(row[0], "123456");
    assert!(row[1].parse::<f64>().unwrap() <= 0.0);
    let ents: Vec<f64> = row[2].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(ents.len(), 7);
    assert!(ents.iter().all(|&h| h >= 0.0));
    assert_eq!(row[3], "0");
}

#[test]
fn inspect_lists_header_and_blocks() {
    let out = String::from_utf8(ok(&["inspect", s(&fixture().model)])).unwrap();
    assert!(out.starts_with("kind=gpt\nversion=1\n"));
    assert!(out.contains("config.d_model=32"));
    assert!(out.contains("block.lm_head.w=[32,258]"));
}

#[test]
fn exit_codes() {
    let f = fixture();
    let bad = f.root.join("corrupt.ckpt");
    let mut bytes = std::fs::read(&f.model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&bad, bytes).unwrap();
    let out = pwlm(&["sample", "--model", s(&bad), "--n", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
    assert_eq!(pwlm(&["sample", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        pwlm(&["config", "--set", "gpt.nope=1"]).status.code(),
        Some(1)
    );
    assert_eq!(
        pwlm(&["guide", "--model", s(&f.model), "--template", "lq"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(pwlm(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_report_is_reproducible() {
    let f = fixture();
    let test = f.root.join("split/test.txt");
    let run = |dir: &str| {
        let out = f.root.join(dir);
        ok(&[
            "eval",
            "--model",
            s(&f.model),
            "--test",
            s(&test),
            "--budgets",
            "50,200",
            "--out-dir",
            s(&out),
        ]);
        out
    };
    let (a, b) = (run("eval_a"), run("eval_b"));
    for name in [
        "report.txt",
        "match_rate.csv",
        "strength.csv",
        "quantiles.csv",
        "alignment.csv",
        "uniqueness.csv",
    ] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let report = std::fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(report.contains("[match_rate]") && report.contains("budget=200"));
}

#[test]
fn split_manifests_are_deterministic() {
    let root = &fixture().root;
    let (a, b) = (root.join("split_a"), root.join("split_b"));
    for d in [&a, &b] {
        ok(&["split", "--synthetic", "--seed", "5", "--out-dir", s(d)]);
    }
    for name in ["train.tsv", "test.txt", "stats.txt"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
}

#[test]
fn config_round_trips_through_a_file() {
    let root = &fixture().root;
    let text = ok(&[
        "config",
        "--set",
        "gpt.d_model=64",
        "--set",
        "sample.top_k=5",
    ]);
    let path = root.join("run.cfg");
    std::fs::write(&path, &text).unwrap();
    assert_eq!(ok(&["config", "--config", s(&path)]), text);
}
