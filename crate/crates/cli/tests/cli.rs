use std::path::PathBuf;
use std::process::{Command, Output};

use obliv::surface::corpus_dir;

fn obliv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obliv")).args(args).output().expect("binary runs")
}

fn file(name: &str) -> String {
    corpus_dir().join(name).to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scratch(name: &str, contents: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("obliv-cli-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join(name);
    std::fs::write(&p, contents).unwrap();
    p
}

#[test]
fn check_accepts_and_rejects_with_the_rule() {
    let ok = obliv(&["--porcelain", "check", &file("region_order_ok.ol")]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).starts_with("typecheck\tok\t"), "{}", stdout(&ok));

    let bad = obliv(&["--porcelain", "check", &file("biased_flip_s1.ol")]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).starts_with("typecheck\terror\tMUX-FLIP\t"), "{}", stdout(&bad));

    let prose = obliv(&["check", &file("double_reveal_s1.ol")]);
    assert_eq!(prose.status.code(), Some(1));
    assert!(stdout(&prose).contains("VARA"));
}

#[test]
fn unreadable_or_malformed_input_exits_with_two() {
    let missing = obliv(&["check", "/nonexistent/program.ol"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: "));

    let p = scratch("bad.ol", "let x = in");
    let malformed = obliv(&["check", p.to_str().unwrap()]);
    assert_eq!(malformed.status.code(), Some(2));
}

#[test]
fn both_monads_print_the_same_distribution() {
    let f = file("region_order_ok.ol");
    let den = obliv(&["--porcelain", "dist", &f, "--steps", "9", "--monad", "den"]);
    let int = obliv(&["--porcelain", "dist", &f, "--steps", "9", "--monad", "int"]);
    assert_eq!(den.status.code(), Some(0));
    assert_eq!(stdout(&den), stdout(&int));
    let lines: Vec<String> = stdout(&den).lines().map(String::from).collect();
    assert_eq!(lines.len(), 4, "{lines:?}");
    assert!(lines.iter().all(|l| l.starts_with("outcome\t1/4\t")));
}

#[test]
fn seeded_runs_repeat() {
    let f = file("reveal_table_s0.ol");
    let a = obliv(&["--porcelain", "run", &f, "--steps", "20", "--seed", "5"]);
    let b = obliv(&["--porcelain", "run", &f, "--steps", "20", "--seed", "5"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).lines().all(|l| l.starts_with("config\t")));
}

#[test]
fn observations_hide_secrets() {
    let o = obliv(&["obs", &file("reveal_table_s0.ol")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("let s0 = • in"), "{}", stdout(&o));
    assert!(!stdout(&o).contains("1S"));
    let t = obliv(&["--porcelain", "obs", &file("reveal_table_s1.ol"), "--steps", "20"]);
    let lines: Vec<String> = stdout(&t).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2, "{lines:?}");
    assert!(lines.iter().all(|l| l.starts_with("observation\t1/2\t")));
    assert_ne!(lines[0], lines[1]);
    assert!(lines[0].contains("read(loc(0))") && lines[1].contains("read(loc(1))"), "{lines:?}");
}

#[test]
fn pmto_verdicts_and_exit_codes() {
    let pass = obliv(&["--porcelain", "pmto", &file("reveal_table_s0.ol"), &file("reveal_table_s1.ol"), "--steps", "20"]);
    assert_eq!(pass.status.code(), Some(0));
    assert!(stdout(&pass).starts_with("verdict\tPASS\t"));

    let leak = obliv(&[
        "--porcelain",
        "pmto",
        &file("double_reveal_s0.ol"),
        &file("double_reveal_s1.ol"),
        "--steps",
        "11",
        "--dynamic",
    ]);
    assert_eq!(leak.status.code(), Some(1));
    let out = stdout(&leak);
    assert!(out.starts_with("verdict\tFAIL\t"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("probs\t")), "{out}");

    let untyped = obliv(&["pmto", &file("double_reveal_s0.ol"), &file("double_reveal_s1.ol"), "--steps", "11"]);
    assert_eq!(untyped.status.code(), Some(1));
    assert!(stdout(&untyped).starts_with("INAPPLICABLE"));
}

#[test]
fn single_program_checks() {
    let f = file("region_order_ok.ol");
    for cmd in ["preserve", "sim", "uniform"] {
        let a = obliv(&["--porcelain", cmd, &f, "--steps", "9"]);
        assert_eq!(a.status.code(), Some(0), "{cmd}");
        let b = obliv(&["--porcelain", cmd, &f, "--steps", "9"]);
        assert_eq!(a.stdout, b.stdout, "{cmd}");
    }
    let leak = obliv(&["uniform", &file("double_reveal_s1.ol"), "--steps", "11", "--dynamic"]);
    assert_eq!(leak.status.code(), Some(1));
    assert!(stdout(&leak).starts_with("FAIL"));
}

#[test]
fn corpus_exit_code_follows_the_expectations() {
    let ok = obliv(&["--porcelain", "corpus", "--filter", "reveal_table"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let out = stdout(&ok);
    assert!(out.lines().filter(|l| l.starts_with("result\t")).all(|l| l.ends_with("\tok")));
    assert!(out.lines().last().unwrap().starts_with("summary\t"));

    let src = std::fs::read_to_string(corpus_dir().join("double_cast.ol")).unwrap();
    scratch("double_cast.ol", &src);
    let m = scratch("manifest.txt", "program double_cast double_cast.ol steps=4 dynamic uniform=pass\n");
    let bad = obliv(&["--porcelain", "corpus", "--manifest", m.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("MISMATCH"));
    assert!(stdout(&bad).contains("summary\t0\t1"));
}
