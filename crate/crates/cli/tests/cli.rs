use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mvs_core::archive::Archive;
use mvs_core::dataio::{load_disparity, load_sequence, volume_from_archive};
use mvs_core::eval::CompletenessCurve;
use mvs_core::sweep::{build_volume, estimate_max_disparity, make_disparity_grid, select_neighbors};

fn mvs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvs")).args(args).env_remove("MVS_CONFIG").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mvs(args);
    assert!(out.status.success(), "mvs {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One generated toy scene and a briefly trained toy checkpoint, shared by
/// all tests of this file.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let scene = root.join("scene");
        ok(&["gen-scene", "--out", s(&scene), "--width", "40", "--height", "32", "--views", "4", "--seed", "5"]);
        let checkpoint = root.join("net.mvsarc");
        ok(&[
            "train", "--manifest", s(&scene.join("manifest.toml")), "--stage", "2", "--out", s(&checkpoint),
            "--iterations", "3", "--scale", "0.125", "-d", "8", "--patch", "24", "--learning-rate", "1e-3",
        ]);
        Fixture { _dir: dir, manifest: scene.join("manifest.toml"), checkpoint, root }
    })
}

#[test]
fn every_flag_lists_a_default() {
    for cmd in ["gen-scene", "sweep", "train", "predict", "refine", "evaluate", "plot"] {
        let help = String::from_utf8(ok(&[cmd, "--help"]).stdout).unwrap();
        // Required flags appear in the usage line and have no default.
        let usage = help.lines().find(|l| l.starts_with("Usage:")).unwrap();
        let required: Vec<&str> = usage.split_whitespace().filter(|t| t.starts_with("--")).collect();
        let mut lines = help.lines().peekable();
        while let Some(line) = lines.next() {
            let t = line.trim_start();
            if !t.starts_with('-') {
                continue;
            }
            let flag = t.split_whitespace().find(|w| w.starts_with("--")).unwrap().trim_end_matches(',');
            if flag == "--help" || required.contains(&flag) {
                continue;
            }
            // Clap puts the description on the flag's line or the next one.
            let doc = format!("{t} {}", lines.peek().copied().unwrap_or(""));
            assert!(doc.contains("[default:"), "{cmd} {flag} shows no default:\n{help}");
        }
    }
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let f = fixture();
    assert_eq!(mvs(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(mvs(&["sweep", "--ref", "0"]).status.code(), Some(1));
    let missing = mvs(&["sweep", "--manifest", "/nonexistent/m.toml", "--ref", "0", "--out", "/tmp/x"]);
    assert_eq!(missing.status.code(), Some(2));
    let stderr = String::from_utf8(missing.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    let vol = f.root.join("too_many.mvsarc");
    let many = mvs(&["sweep", "--manifest", s(&f.manifest), "--ref", "0", "--out", s(&vol), "-n", "9", "-d", "8"]);
    assert_eq!(many.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&many.stderr).contains("insufficient views"));
}

#[test]
fn sweep_archive_matches_the_library_volume() {
    let f = fixture();
    let out = f.root.join("vol.mvsarc");
    ok(&["sweep", "--manifest", s(&f.manifest), "--ref", "1", "--out", s(&out), "-n", "2", "-d", "6"]);
    let archive = Archive::load(&out).unwrap();
    let loaded = volume_from_archive(&archive, &out).unwrap();

    let seq = load_sequence(&f.manifest).unwrap();
    let reference = seq.view(1).unwrap();
    let points = seq.points.as_ref().unwrap();
    let ids = select_neighbors(&seq.views, points, 1, 2).unwrap();
    let neighbors: Vec<_> = ids.iter().map(|&i| seq.view(i).unwrap()).collect();
    let grid = make_disparity_grid(estimate_max_disparity(points, reference, 1.0).unwrap(), 6).unwrap();
    let expected = build_volume(reference, &neighbors, &grid, u64::MAX).unwrap();
    assert_eq!(loaded.grid.levels(), 6);
    assert_eq!(loaded.neighbor_ids, ids);
    assert_eq!(loaded.data, expected.data);
    assert_eq!(loaded.mask, expected.mask);
}

#[test]
fn predict_keeps_image_size_and_refinement_is_optional() {
    let f = fixture();
    let refined = f.root.join("refined.pfm");
    let raw = f.root.join("raw.pfm");
    let dist = f.root.join("dist.mvsarc");
    let ck = s(&f.checkpoint);
    ok(&["predict", "--manifest", s(&f.manifest), "--ref", "0", "--checkpoint", ck, "--out", s(&refined), "-n", "3"]);
    ok(&[
        "predict", "--manifest", s(&f.manifest), "--ref", "0", "--checkpoint", ck, "--out", s(&raw), "-n", "3", "--no-refine",
        "--distribution", s(&dist),
    ]);
    let a = load_disparity(&refined).unwrap();
    let b = load_disparity(&raw).unwrap();
    assert_eq!((a.width, a.height), (40, 32));
    assert_eq!((b.width, b.height), (40, 32));
    // Refining the saved unrefined distribution reproduces the refined map.
    let again = f.root.join("again.pfm");
    ok(&["refine", "--distribution", s(&dist), "--manifest", s(&f.manifest), "--ref", "0", "--out", s(&again)]);
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&refined).unwrap());
    // Zero mean-field iterations leave the raw prediction untouched.
    let ident = f.root.join("ident.pfm");
    ok(&[
        "refine", "--distribution", s(&dist), "--manifest", s(&f.manifest), "--ref", "0", "--out", s(&ident),
        "--crf-iterations", "0",
    ]);
    assert_eq!(std::fs::read(&ident).unwrap(), std::fs::read(&raw).unwrap());

    let wrong_d = mvs(&["predict", "--manifest", s(&f.manifest), "--ref", "0", "--checkpoint", ck, "--out", s(&raw), "-d", "9"]);
    assert_eq!(wrong_d.status.code(), Some(1));
}

#[test]
fn config_file_and_flags_take_precedence_in_order() {
    let f = fixture();
    let cfg = f.root.join("pipeline.toml");
    std::fs::write(&cfg, "[sweep]\nlevels = 5\nneighbors = 1\n").unwrap();
    let out = f.root.join("cfg_vol.mvsarc");
    let read = |p: &Path| volume_from_archive(&Archive::load(p).unwrap(), p).unwrap();
    ok(&["sweep", "--config", s(&cfg), "--manifest", s(&f.manifest), "--ref", "0", "--out", s(&out)]);
    let v = read(&out);
    assert_eq!((v.levels(), v.num_neighbors()), (5, 1));
    ok(&["sweep", "--config", s(&cfg), "--manifest", s(&f.manifest), "--ref", "0", "--out", s(&out), "-n", "2"]);
    let v = read(&out);
    assert_eq!((v.levels(), v.num_neighbors()), (5, 2));
    let env = Command::new(env!("CARGO_BIN_EXE_mvs"))
        .args(["sweep", "--manifest", s(&f.manifest), "--ref", "0", "--out", s(&out)])
        .env("MVS_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(env.status.success());
    assert_eq!(read(&out).levels(), 5);
    std::fs::write(&cfg, "[sweep]\nlevelz = 5\n").unwrap();
    let bad = mvs(&["sweep", "--config", s(&cfg), "--manifest", s(&f.manifest), "--ref", "0", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn evaluate_perfect_prediction_and_curve_rows() {
    let f = fixture();
    let gt = f.manifest.parent().unwrap().join("frame_0000.pfm");
    let report = f.root.join("report.json");
    let curve = f.root.join("curve.csv");
    ok(&[
        "evaluate", "--pred", s(&gt), "--manifest", s(&f.manifest), "--ref", "0", "--report", s(&report), "--curve",
        s(&curve), "--thresholds", "7", "--max-threshold", "0.5",
    ]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["geometric_error"].as_f64(), Some(0.0));
    // The toy scene has occlusion edges; only check the value is a sane color error.
    let photometric = r["photometric_error"].as_f64().unwrap();
    assert!(photometric > 0.0 && photometric < 0.05, "{photometric}");
    assert_eq!(r["completeness"]["fractions"].as_array().unwrap().len(), 7);
    let c = CompletenessCurve::from_csv(&std::fs::read_to_string(&curve).unwrap(), &curve).unwrap();
    assert_eq!(c.thresholds.len(), 7);
    assert!(c.fractions.iter().all(|&v| v == 1.0));
}

#[test]
fn plot_draws_one_curve_per_file_deterministically() {
    let f = fixture();
    let paths: Vec<PathBuf> = (0..3).map(|k| f.root.join(format!("c{k}.csv"))).collect();
    for (k, p) in paths.iter().enumerate() {
        let scale = 1.0 / (k + 1) as f64;
        std::fs::write(p, format!("threshold,fraction\n0.1,{}\n0.2,{}\n", 0.5 * scale, scale)).unwrap();
    }
    let (a, b) = (f.root.join("a.svg"), f.root.join("b.svg"));
    for out in [&a, &b] {
        ok(&["plot", s(&paths[0]), s(&paths[1]), s(&paths[2]), "--out", s(out)]);
    }
    let svg = std::fs::read_to_string(&a).unwrap();
    assert_eq!(svg.matches("class=\"curve\"").count(), 3);
    assert!(svg.contains(">threshold<") && svg.contains(">fraction<"));
    assert_eq!(svg, std::fs::read_to_string(&b).unwrap());
}

fn trace(path: &Path) -> Vec<(usize, String)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.to_string())
        })
        .collect()
}

#[test]
fn training_trace_is_seeded_and_resumable() {
    let f = fixture();
    let common =
        ["--manifest", s(&f.manifest), "--stage", "1", "--scale", "0.125", "-d", "8", "--patch", "24", "--seed", "9"];
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train"];
        args.extend_from_slice(&common);
        args.extend_from_slice(&["--out", s(out)]);
        args.extend_from_slice(extra);
        ok(&args);
    };
    let (a, b, c) = (f.root.join("ta.mvsarc"), f.root.join("tb.mvsarc"), f.root.join("tc.mvsarc"));
    run(&a, &["--iterations", "6"]);
    run(&b, &["--iterations", "6"]);
    let ta = trace(&f.root.join("ta.mvsarc.trace.csv"));
    assert_eq!(ta, trace(&f.root.join("tb.mvsarc.trace.csv")));
    assert_eq!(ta.iter().map(|t| t.0).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());

    run(&c, &["--iterations", "3"]);
    run(&c, &["--iterations", "6", "--resume", s(&c)]);
    let tc = trace(&f.root.join("tc.mvsarc.trace.csv"));
    assert_eq!(tc, ta);
    assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(&a).unwrap());
}
