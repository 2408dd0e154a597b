use std::os::unix::fs::PermissionsExt;
use std::path::Path;
use std::process::{Command, Output};

fn antcensus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_antcensus"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// Two labelled 800x600 images with a handful of boxes.
fn labelled_dataset(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let labels = root.join("labels");
    std::fs::create_dir_all(&labels).unwrap();
    write(
        &labels.join("a.txt"),
        "0 0.100000 0.100000 0.050000 0.050000\n0 0.450000 0.450000 0.040000 0.060000\n0 0.900000 0.800000 0.030000 0.030000\n",
    );
    write(
        &labels.join("b.txt"),
        "0 0.250000 0.750000 0.050000 0.050000\n0 0.751000 0.251000 0.020000 0.020000\n",
    );
    let sizes = root.join("sizes.csv");
    write(&sizes, "image_id,width,height\na,800,600\nb,800,600\n");
    (labels, sizes)
}

fn report_row<'a>(csv: &'a str, id: &str) -> Vec<&'a str> {
    csv.lines()
        .find(|l| l.starts_with(&format!("{id},")))
        .unwrap_or_else(|| panic!("no {id} row in {csv}"))
        .split(',')
        .collect()
}

#[test]
fn eval_identical_dirs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (labels, sizes) = labelled_dataset(dir.path());
    let report = dir.path().join("report.csv");
    let out = antcensus(&[
        "eval",
        "--pred",
        p(&labels),
        "--gt",
        p(&labels),
        "--sizes",
        p(&sizes),
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("image_id,tp,fp,fn,precision,recall\n"));
    let total = report_row(&csv, "TOTAL");
    assert_eq!(&total[1..4], ["5", "0", "0"]);
    assert_eq!(total[4].parse::<f64>().unwrap(), 1.0);
    assert_eq!(total[5].parse::<f64>().unwrap(), 1.0);
    assert!(out.stdout.is_empty());
}

#[test]
fn eval_streams_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let (labels, sizes) = labelled_dataset(dir.path());
    let out = antcensus(&[
        "eval",
        "--pred",
        p(&labels),
        "--gt",
        p(&labels),
        "--sizes",
        p(&sizes),
        "--out",
        "-",
    ]);
    assert_eq!(code(&out), 0);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(report_row(&csv, "a")[1], "3");
    assert_eq!(report_row(&csv, "MACRO").len(), 6);
}

#[test]
fn usage_errors_exit_one() {
    let out = antcensus(&[
        "eval", "--iou", "1.5", "--pred", "x", "--gt", "y", "--sizes", "z", "--out", "-",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("1.5"));
    assert_eq!(code(&antcensus(&["eval", "--bogus-flag"])), 1);
    assert_eq!(code(&antcensus(&["no-such-command"])), 1);
    assert_eq!(
        code(&antcensus(&[
            "sample-plan",
            "--pool",
            "10",
            "--n",
            "5",
            "--out",
            "-"
        ])),
        1
    );
    assert_eq!(code(&antcensus(&["--help"])), 0);
    let help = antcensus(&["eval", "--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.contains("[default: 0.6]") && text.contains("[default: 0.25]"));
    let help = antcensus(&["heatmap", "--help"]);
    assert!(String::from_utf8_lossy(&help.stdout).contains("[default: 1000]"));
}

#[test]
fn malformed_labels_exit_two_naming_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let (labels, sizes) = labelled_dataset(dir.path());
    write(
        &labels.join("b.txt"),
        "0 0.5 0.5 0.1 0.1\n0 0.5 oops 0.1 0.1\n",
    );
    let out = antcensus(&[
        "eval",
        "--pred",
        p(&labels),
        "--gt",
        p(&labels),
        "--sizes",
        p(&sizes),
        "--out",
        "-",
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("b.txt") && err.contains("line 2"), "{err}");
}

#[test]
fn slice_four_by_ten_grid() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("field.png");
    image::RgbImage::from_fn(1636, 2180, |x, y| {
        image::Rgb([(x % 256) as u8, (y % 256) as u8, 7])
    })
    .save(&img)
    .unwrap();
    let out_dir = dir.path().join("tiles");
    let out = antcensus(&[
        "slice",
        "--images",
        p(&img),
        "--cols",
        "4",
        "--rows",
        "10",
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = std::fs::read_to_string(out_dir.join("tiles.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 40);
    for row in &rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!((f[6], f[7]), ("409", "218"), "{row}");
    }
    let tile = image::open(out_dir.join("field__r3c2.png"))
        .unwrap()
        .to_rgb8();
    assert_eq!(tile.dimensions(), (409, 218));
    // Pixel (0, 0) of tile r3c2 is pixel (818, 654) of the source.
    assert_eq!(
        tile.get_pixel(0, 0).0,
        [(818 % 256) as u8, (654 % 256) as u8, 7]
    );
}

#[test]
fn slice_labels_detect_merge_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (labels, sizes) = labelled_dataset(dir.path());
    let tiles = dir.path().join("tile_labels");
    let out = antcensus(&[
        "slice-labels",
        "--labels",
        p(&labels),
        "--sizes",
        p(&sizes),
        "--cols",
        "2",
        "--rows",
        "2",
        "--out",
        p(&tiles),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(tiles.join("a__r0c0.txt").exists());

    let merged = dir.path().join("merged");
    let out = antcensus(&[
        "merge",
        "--dets",
        p(&tiles),
        "--manifest",
        p(&tiles.join("tiles.csv")),
        "--out",
        p(&merged),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = antcensus(&[
        "eval",
        "--pred",
        p(&merged),
        "--gt",
        p(&labels),
        "--sizes",
        p(&sizes),
        "--out",
        "-",
    ]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let total = report_row(&csv, "TOTAL");
    assert_eq!(&total[1..4], ["5", "0", "0"], "{csv}");
}

fn blank_images(dir: &Path, ids: &[&str], w: u32, h: u32) -> std::path::PathBuf {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).unwrap();
    for id in ids {
        image::RgbImage::new(w, h)
            .save(images.join(format!("{id}.png")))
            .unwrap();
    }
    images
}

#[test]
fn detect_replay_and_synthetic_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (labels, sizes) = labelled_dataset(dir.path());
    let images = blank_images(dir.path(), &["a", "b"], 800, 600);

    let replay = dir.path().join("replay");
    let out = antcensus(&[
        "detect",
        "--backend",
        "replay",
        "--images",
        p(&images),
        "--source",
        p(&labels),
        "--cols",
        "2",
        "--rows",
        "2",
        "--out",
        p(&replay),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = antcensus(&[
        "eval",
        "--pred",
        p(&replay),
        "--gt",
        p(&labels),
        "--sizes",
        p(&sizes),
        "--out",
        "-",
    ]);
    assert_eq!(
        &report_row(&String::from_utf8(out.stdout).unwrap(), "TOTAL")[1..4],
        ["5", "0", "0"]
    );

    let run = |name: &str, seed: &str| {
        let dest = dir.path().join(name);
        let out = antcensus(&[
            "detect",
            "--backend",
            "synthetic",
            "--images",
            p(&images),
            "--gt",
            p(&labels),
            "--fn-rate",
            "0.4",
            "--fp-rate",
            "0.5",
            "--center-jitter",
            "2",
            "--seed",
            seed,
            "--out",
            p(&dest),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        (
            std::fs::read(dest.join("a.txt")).unwrap(),
            std::fs::read(dest.join("b.txt")).unwrap(),
        )
    };
    let first = run("s1", "9");
    assert_eq!(first, run("s2", "9"));
    assert_ne!(first, run("s3", "10"));

    let missing_seed = antcensus(&[
        "detect",
        "--backend",
        "synthetic",
        "--images",
        p(&images),
        "--gt",
        p(&labels),
        "--out",
        p(&dir.path().join("s4")),
    ]);
    assert_eq!(code(&missing_seed), 1);
}

fn script(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("model.sh");
    write(&path, &format!("#!/bin/sh\n{body}\n"));
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

#[test]
fn detect_external_backend_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let images = blank_images(dir.path(), &["a"], 100, 100);
    let ok = script(
        dir.path(),
        r#"while [ $# -gt 0 ]; do
  case "$1" in
    --output) out="$2"; shift 2;;
    *) shift;;
  esac
done
echo '0 0.5 0.5 0.2 0.2 0.7' > "$out""#,
    );
    let dest = dir.path().join("ext");
    let out = antcensus(&[
        "detect",
        "--backend",
        "external",
        "--images",
        p(&images),
        "--command",
        p(&ok),
        "--command-arg",
        "--weights",
        "--command-arg",
        "x.pt",
        "--out",
        p(&dest),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        std::fs::read_to_string(dest.join("a.txt")).unwrap(),
        "0 0.500000 0.500000 0.200000 0.200000 0.700000\n"
    );

    let failing = script(dir.path(), "echo 'CUDA out of memory' >&2\nexit 1");
    let out = antcensus(&[
        "detect",
        "--backend",
        "external",
        "--images",
        p(&images),
        "--command",
        p(&failing),
        "--out",
        p(&dest),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("CUDA out of memory"));

    let slow = script(dir.path(), "sleep 10");
    let started = std::time::Instant::now();
    let out = antcensus(&[
        "detect",
        "--backend",
        "external",
        "--images",
        p(&images),
        "--command",
        p(&slow),
        "--timeout",
        "1",
        "--out",
        p(&dest),
    ]);
    assert_eq!(code(&out), 3);
    assert!(started.elapsed().as_secs() < 8);
}

#[test]
fn agree_from_csv_and_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let manual = dir.path().join("manual.csv");
    let auto = dir.path().join("auto.csv");
    write(&manual, "image_id,count\na,1\nb,2\nc,3\nd,4\n");
    write(&auto, "image_id,count\na,2\nb,1\nc,4\nd,3\n");
    let out = antcensus(&[
        "agree",
        "--manual",
        p(&manual),
        "--auto",
        p(&auto),
        "--out",
        "-",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(fields[0], "4");
    assert!((fields[1].parse::<f64>().unwrap() - 0.36).abs() < 1e-12);
    assert!((fields[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);

    write(&auto, "image_id,count\na,2\nb,1\nc,4\n");
    let out = antcensus(&[
        "agree",
        "--manual",
        p(&manual),
        "--auto",
        p(&auto),
        "--out",
        "-",
    ]);
    assert_eq!(code(&out), 2);

    let (labels, _) = labelled_dataset(dir.path());
    let out = antcensus(&[
        "agree",
        "--manual",
        p(&labels),
        "--auto",
        p(&labels),
        "--out",
        "-",
    ]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout).unwrap().ends_with(",1,0\n"));
}

#[test]
fn heatmap_writes_png_and_raw_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (labels, sizes) = labelled_dataset(dir.path());
    let png = dir.path().join("heat.png");
    let raw = dir.path().join("heat.csv");
    let out = antcensus(&[
        "heatmap",
        "--dets",
        p(&labels),
        "--sizes",
        p(&sizes),
        "--grid",
        "100",
        "--out",
        p(&png),
        "--raw",
        p(&raw),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let img = image::open(&png).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (100, 100));
    let grid = std::fs::read_to_string(&raw).unwrap();
    assert_eq!(grid.lines().count(), 100);
    assert!(grid.lines().all(|l| l.split(',').count() == 100));
    let first = std::fs::read(&png).unwrap();
    antcensus(&[
        "heatmap",
        "--dets",
        p(&labels),
        "--sizes",
        p(&sizes),
        "--grid",
        "100",
        "--out",
        p(&png),
    ]);
    assert_eq!(first, std::fs::read(&png).unwrap());
}

#[test]
fn timeseries_with_line_and_bins() {
    let dir = tempfile::tempdir().unwrap();
    let (labels, sizes) = labelled_dataset(dir.path());
    let times = dir.path().join("times.csv");
    write(&times, "image_id,timestamp\na,0.5\nb,1.5\nc,2.0\n");
    let out = antcensus(&[
        "timeseries",
        "--dets",
        p(&labels),
        "--times",
        p(&times),
        "--line",
        "-1,600",
        "--sizes",
        p(&sizes),
        "--out",
        "-",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "image_id,t,total,side_positive,side_negative");
    // Line y = 600 - x: a has centers (80,60), (360,270), (720,480).
    assert_eq!(lines[1], "a,0.5,3,2,1");
    assert_eq!(lines[3], "c,2,0,0,0");

    let plot = dir.path().join("series.svg");
    let out = antcensus(&[
        "timeseries",
        "--dets",
        p(&labels),
        "--times",
        p(&times),
        "--bin",
        "2",
        "--out",
        "-",
        "--plot",
        p(&plot),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        csv,
        "image_id,t,total,side_positive,side_negative\na,0,5,,\nc,2,0,,\n"
    );
    assert!(std::fs::read_to_string(&plot).unwrap().starts_with("<svg"));

    let out = antcensus(&[
        "timeseries",
        "--dets",
        p(&labels),
        "--times",
        p(&times),
        "--line-vertical",
        "400",
        "--out",
        "-",
    ]);
    assert_eq!(code(&out), 1, "line without sizes is a usage error");
}

#[test]
fn sample_plan_is_reproducible() {
    let run = |seed: &str| {
        let out = antcensus(&[
            "sample-plan",
            "--pool",
            "954",
            "--n",
            "1024",
            "--replicates",
            "3",
            "--seed",
            seed,
            "--out",
            "-",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out.stdout
    };
    let a = run("1");
    assert_eq!(a, run("1"));
    assert_ne!(a, run("2"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 1024);
    assert_eq!(text.lines().next(), Some("replicate,draw,index"));
}
