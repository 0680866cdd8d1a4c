use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vesselgan::datapipe::{write_manifest, write_plane_f32, write_plane_pgm, write_rgb, ManifestRow, Plane, RgbImage};

fn vesselgan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vesselgan")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn phantom_writes_triples_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = vesselgan(dir.path(), &["phantom", "--seed", "7", "--count", "4", "--side", "64", "--out", "d"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("seed = 7") && stdout.contains("side = 64"), "{stdout}");

    let manifest = fs::read_to_string(dir.path().join("d/manifest.csv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines[0], "id,image,label,mask");
    assert_eq!(lines.len(), 5);
    for id in ["phantom_00007", "phantom_00008", "phantom_00009", "phantom_00010"] {
        for suffix in [".ppm", "_label.pgm", "_mask.pgm"] {
            assert!(dir.path().join(format!("d/{id}{suffix}")).is_file(), "{id}{suffix}");
        }
    }
    let pairs = vesselgan::datapipe::load_manifest(&dir.path().join("d/manifest.csv")).unwrap();
    assert_eq!(pairs.len(), 4);
    assert_eq!(pairs[0].image.dims(), (64, 64));
}

#[test]
fn missing_config_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = vesselgan(dir.path(), &["train", "--config", "missing.cfg", "--manifest", "m.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.cfg"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["bogus"][..],
        &["phantom", "--out", "d", "--colour", "red"],
        &["eval", "--pred", "p"],
        &["segment", "--ckpt", "c", "--out", "o"],
        &["phantom", "--count", "many", "--out", "d"],
    ] {
        let o = vesselgan(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn bad_manifest_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.csv"), "id,image,label\na,nothere.ppm,nothere.pgm\n").unwrap();
    let o = vesselgan(dir.path(), &["train", "--manifest", "m.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nothere.ppm"), "{}", stderr(&o));
}

fn binary(h: usize, w: usize, ones: impl Fn(usize) -> bool) -> Plane {
    Plane::new(h, w, (0..h * w).map(|i| if ones(i) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Two fixtures with hand-counted confusion: 8/88/2/2 and tp=2, fn=2.
fn eval_fixture(dir: &Path) {
    let gt_a = binary(10, 10, |i| i < 10);
    let pred_a = binary(10, 10, |i| i < 8 || (10..12).contains(&i));
    let gt_b = binary(2, 2, |_| true);
    let pred_b = binary(2, 2, |i| i < 2);
    fs::create_dir_all(dir.join("p")).unwrap();
    for (id, gt, pred) in [("a", &gt_a, &pred_a), ("b", &gt_b, &pred_b)] {
        let (h, w) = gt.dims();
        write_rgb(&dir.join(format!("{id}.ppm")), &RgbImage::filled(h, w, 0.5)).unwrap();
        write_plane_pgm(&dir.join(format!("{id}_label.pgm")), gt).unwrap();
        write_plane_pgm(&dir.join(format!("p/{id}.pgm")), pred).unwrap();
    }
    // the sidecar wins over a contradicting PGM
    write_plane_pgm(&dir.join("p/a.pgm"), &binary(10, 10, |_| false)).unwrap();
    write_plane_f32(&dir.join("p/a.f32"), &pred_a).unwrap();
    let rows: Vec<ManifestRow> = ["a", "b"]
        .iter()
        .map(|id| ManifestRow {
            id: id.to_string(),
            image: format!("{id}.ppm"),
            label: format!("{id}_label.pgm"),
            mask: None,
        })
        .collect();
    write_manifest(&dir.join("m.csv"), &rows).unwrap();
}

fn assert_row(line: &str, id: &str, counts: [u64; 4], scores: [Option<f64>; 5]) {
    let f: Vec<&str> = line.split(',').collect();
    assert_eq!(f.len(), 11, "{line}");
    assert_eq!(f[0], id);
    assert_eq!(f[1], "0.5");
    let got: Vec<u64> = f[2..6].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(got, counts, "{line}");
    for (field, want) in f[6..].iter().zip(scores) {
        match want {
            Some(w) => assert!((field.parse::<f64>().unwrap() - w).abs() <= 1e-12, "{line}"),
            None => assert!(field.is_empty(), "{line}"),
        }
    }
}

#[test]
fn eval_reproduces_hand_counted_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    eval_fixture(dir.path());
    let o =
        vesselgan(dir.path(), &["eval", "--pred", "p", "--manifest", "m.csv", "--threshold", "0.5", "--out", "e.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("e.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], vesselgan::metrics::CSV_HEADER);
    assert_row(lines[1], "a", [8, 88, 2, 2], [Some(0.96), Some(0.8), Some(88.0 / 90.0), Some(0.8), Some(0.8)]);
    assert_row(lines[2], "b", [2, 0, 0, 2], [Some(0.5), Some(0.5), None, Some(1.0), Some(2.0 / 3.0)]);
    assert_row(
        lines[3],
        "__micro__",
        [10, 88, 2, 4],
        [Some(98.0 / 104.0), Some(10.0 / 14.0), Some(88.0 / 90.0), Some(10.0 / 12.0), Some(20.0 / 26.0)],
    );
}

#[test]
fn eval_sweep_covers_every_threshold() {
    let dir = tempfile::tempdir().unwrap();
    eval_fixture(dir.path());
    let o = vesselgan(dir.path(), &["eval", "--pred", "p", "--manifest", "m.csv", "--sweep"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("p/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 19 * 4);
}

#[test]
fn eval_without_predictions_fails() {
    let dir = tempfile::tempdir().unwrap();
    eval_fixture(dir.path());
    fs::remove_file(dir.path().join("p/b.pgm")).unwrap();
    let o = vesselgan(dir.path(), &["eval", "--pred", "p", "--manifest", "m.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no prediction for b"), "{}", stderr(&o));
}

const TINY: &str =
    "side = 32\ndepth = 2\nbase_channels = 4\ndisc_depth = 2\ndisc_base_channels = 4\nepochs = 2\nseed = 5\n";

fn pipeline(dir: &Path) -> Vec<Vec<u8>> {
    fs::write(dir.join("t.cfg"), TINY).unwrap();
    let steps: [&[&str]; 4] = [
        &["phantom", "--seed", "3", "--count", "3", "--side", "32", "--out", "d"],
        &["train", "--config", "t.cfg", "--manifest", "d/manifest.csv", "--out", "run"],
        &["segment", "--ckpt", "run/generator.ckpt", "--manifest", "d/manifest.csv", "--out", "p"],
        &["eval", "--pred", "p", "--manifest", "d/manifest.csv", "--sweep"],
    ];
    for args in steps {
        let o = vesselgan(dir, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let o =
        vesselgan(dir, &["segment", "--ckpt", "run/generator.ckpt", "--image", "d/phantom_00004.ppm", "--out", "one"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(dir.join("one/phantom_00004.f32")).unwrap(),
        fs::read(dir.join("p/phantom_00004.f32")).unwrap()
    );
    assert_eq!(fs::read(dir.join("one/phantom_00004.f32")).unwrap().len(), 4 * 32 * 32);

    ["run/losses.csv", "run/generator.ckpt", "run/discriminator.ckpt", "p/phantom_00003.pgm", "p/eval.csv"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect()
}

#[test]
fn end_to_end_runs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    assert_eq!(String::from_utf8_lossy(&first[0]).lines().count(), 1 + 6);
    assert_eq!(first, pipeline(b.path()));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = vesselgan(dir.path(), &["gradcheck", "--seed", "11"]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.contains(", 0 failed"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}
