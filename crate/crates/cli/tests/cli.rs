use std::fs;
use std::path::{Path, PathBuf};

use urbdense_cli::dispatch;
use urbdense_core::labeler::DensityLabelGrid;

/// Small city, tiny networks and few trees so the whole chain runs in seconds.
const FAST: &str = "\
synth.size = 96
synth.first_year = 2013
synth.last_year = 2017
synth.reference_year = 2014
sample.patch_size = 16
sample.patch_step = 8
sample.min_distance = 60
predict.step = 8
train.epochs = 2
train.batch_size = 4
rf.n_trees = 10
model.entry_channels = 4,6,8
model.middle_blocks = 1
model.exit_channels = 8
model.aspp_channels = 4
model.low_level_channels = 3
model.fcn_early_channels = 4,4,6,6
model.fcn_late_channels = 6
";

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("urbdense").chain(args.iter().copied()))
}

fn ok(args: &[&str]) {
    assert_eq!(run(args), 0, "urbdense {}", args.join(" "));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs synth through evaluate in `root` and returns the files whose bytes
/// must be reproducible.
fn pipeline(root: &Path, arch: &str) -> Vec<PathBuf> {
    let cfg = root.join("run.cfg");
    fs::write(&cfg, FAST).unwrap();
    let c = s(&cfg);
    let p = |name: &str| root.join(name);
    ok(&["synth", "--config", c, "--seed", "5", "--out", s(&p("city"))]);
    ok(&["composite", "--config", c, "--stack", s(&p("city/stack")), "--year", "2014", "--out", s(&p("raw_2014.dmr"))]);
    ok(&["scales", "--config", c, "--composite", s(&p("raw_2014.dmr")), "--year", "2014", "--out", s(&p("scales.txt"))]);
    ok(&["standardize", "--config", c, "--composite", s(&p("raw_2014.dmr")), "--scales", s(&p("scales.txt")), "--out", s(&p("std_2014.dmr"))]);
    ok(&["label", "--config", c, "--grids", s(&p("city/scenario/grids_2014.dmr")), "--year", "2014", "--out", s(&p("labels"))]);
    let labels = p("labels/horizontal.dmr");
    ok(&["sample", "--config", c, "--seed", "5", "--composite", s(&p("std_2014.dmr")), "--labels", s(&labels), "--rows", "0:48", "--out", s(&p("samples"))]);
    ok(&["train", "--config", c, "--seed", "5", "--arch", arch, "--data", s(&p("samples")), "--out", s(&p("model"))]);
    ok(&["predict", "--config", c, "--model", s(&p("model")), "--composite", s(&p("std_2014.dmr")), "--year", "2014", "--rows", "48:96", "--out", s(&p("map"))]);
    ok(&["evaluate", "--config", c, "--predicted", s(&p("map/labels.dmr")), "--reference", s(&labels), "--rows", "48:96", "--out", s(&p("eval/metrics.csv"))]);
    vec![
        p("raw_2014.dmr"),
        p("std_2014.dmr"),
        p("scales.txt"),
        p("samples/sites.csv"),
        p("map/labels.dmr"),
        p("map/probabilities.dmr"),
        p("eval/metrics.csv"),
        p("eval/metrics.confusion.csv"),
        p("eval/run_config.txt"),
    ]
}

#[test]
fn network_pipeline_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let files_a = pipeline(a.path(), "fcn");
    let files_b = pipeline(b.path(), "fcn");
    for (x, y) in files_a.iter().zip(&files_b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    let map = DensityLabelGrid::read(a.path().join("map/labels.dmr")).unwrap();
    assert_eq!((map.height, map.width, map.epoch), (48, 96, 2014));
    let metrics = fs::read_to_string(a.path().join("eval/metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 2);
    let echoed = fs::read_to_string(a.path().join("model/run_config.txt")).unwrap();
    assert!(echoed.contains("seed = 5"));
    assert!(echoed.contains("model.aspp_channels = 4"));
    assert!(a.path().join("model/training_log.csv").exists());
}

#[test]
fn forest_pipeline_and_downstream_commands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root, "rf");
    assert!(root.join("model/forest.txt").exists());
    let c = root.join("run.cfg");
    let c = s(&c);
    let p = |name: &str| root.join(name);
    // Maps of four more years for smoothing, growth and trends.
    let years = [2013, 2015, 2016, 2017];
    for y in years {
        let y = y.to_string();
        ok(&["composite", "--config", c, "--stack", s(&p("city/stack")), "--year", &y, "--out", s(&p(&format!("raw_{y}.dmr")))]);
        ok(&["standardize", "--config", c, "--composite", s(&p(&format!("raw_{y}.dmr"))), "--scales", s(&p("scales.txt")), "--out", s(&p(&format!("std_{y}.dmr")))]);
        ok(&["predict", "--config", c, "--model", s(&p("model")), "--composite", s(&p(&format!("std_{y}.dmr"))), "--year", &y, "--out", s(&p(&format!("map_{y}")))]);
        ok(&["label", "--config", c, "--grids", s(&p(&format!("city/scenario/grids_{y}.dmr"))), "--year", &y, "--out", s(&p(&format!("labels_{y}")))]);
    }
    ok(&["predict", "--config", c, "--model", s(&p("model")), "--composite", s(&p("std_2014.dmr")), "--year", "2014", "--out", s(&p("map_2014"))]);
    let probs: Vec<PathBuf> = (2013..=2017).map(|y| p(&format!("map_{y}/probabilities.dmr"))).collect();
    let mut args = vec!["smooth", "--config", c, "--years", "2013,2014,2015,2016,2017", "--out"];
    let smooth_out = p("smoothed");
    args.push(s(&smooth_out));
    args.push("--probabilities");
    args.extend(probs.iter().map(|x| s(x)));
    ok(&args);
    let smoothed = DensityLabelGrid::read(p("smoothed/labels_2015.dmr")).unwrap();
    assert_eq!(smoothed.epoch, 2015);
    assert!(!p("smoothed/labels_2013.dmr").exists());

    ok(&["growth", "--earlier", s(&p("map_2013/labels.dmr")), "--later", s(&p("map_2017/labels.dmr")),
        "--reference-earlier", s(&p("labels_2013/horizontal.dmr")), "--reference-later", s(&p("labels_2017/horizontal.dmr")),
        "--out", s(&p("growth.csv"))]);
    assert!(fs::read_to_string(p("growth.csv")).unwrap().starts_with("statistic,value\ntrue_positive,"));

    ok(&["mcnemar", "--a", s(&p("map_2014/labels.dmr")), "--b", s(&p("map_2015/labels.dmr")),
        "--reference", s(&p("labels/horizontal.dmr")), "--out", s(&p("mcnemar.csv"))]);
    assert!(fs::read_to_string(p("mcnemar.csv")).unwrap().contains("chi2_corrected,"));

    fs::write(p("names.csv"), "id,name\n0,centre\n").unwrap();
    ok(&["trends", "--horizontal", s(&p("labels_2013/horizontal.dmr")), s(&p("labels_2017/horizontal.dmr")),
        "--vertical", s(&p("labels_2013/vertical.dmr")), s(&p("labels_2017/vertical.dmr")),
        "--regions", s(&p("city/scenario/districts.dmr")), "--names", s(&p("names.csv")), "--out", s(&p("trends.csv"))]);
    let trends = fs::read_to_string(p("trends.csv")).unwrap();
    assert!(trends.starts_with("region,year,class,hectares,population\n"));
    assert!(trends.contains("centre,2017,"));

    ok(&["render", "--labels", s(&p("map_2014/labels.dmr")), "--scale", "2", "--out", s(&p("map.ppm"))]);
    let ppm = fs::read(p("map.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n192 192\n255\n"));
    assert_eq!(ppm.len(), b"P6\n192 192\n255\n".len() + 192 * 192 * 3);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["synth"]), 1);
    assert_eq!(run(&["synth", "--set", "synth.sise=64", "--out", s(&out)]), 1);
    assert_eq!(run(&["synth", "--set", "model.dropout=0.5", "--out", s(&out)]), 1);
    assert_eq!(run(&["synth", "--set", "synth.size=big", "--out", s(&out)]), 1);
    assert_eq!(run(&["evaluate", "--predicted", "a", "--reference", "b", "--rows", "5:2", "--out", "c"]), 1);
    assert_eq!(run(&["gradcheck", "--arch", "resnet"]), 1);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.epochs = 2\nunknown.key = 1\n").unwrap();
    assert_eq!(run(&["synth", "--config", s(&cfg), "--out", s(&out)]), 1);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.dmr");
    let out = dir.path().join("out.dmr");
    assert_eq!(run(&["render", "--labels", s(&missing), "--out", s(&out)]), 2);
    fs::write(&missing, b"not a raster").unwrap();
    assert_eq!(run(&["standardize", "--composite", s(&missing), "--scales", s(&missing), "--out", s(&out)]), 2);
}

#[test]
fn flags_win_over_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "seed = 3\ngradcheck.tolerance = 1e-5\n").unwrap();
    let out = dir.path().join("gc");
    assert_eq!(run(&["gradcheck", "--arch", "layers", "--config", s(&cfg), "--seed", "9", "--set", "gradcheck.tolerance=2e-5", "--out", s(&out)]), 0);
    let echoed = fs::read_to_string(out.join("run_config.txt")).unwrap();
    assert!(echoed.contains("seed = 9"));
    assert!(echoed.contains("gradcheck.tolerance = 2e-5"));
    assert!(fs::read_to_string(out.join("gradcheck.txt")).unwrap().contains("conv"));
}
