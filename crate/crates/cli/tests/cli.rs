use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
data.objects = 2
data.views = 8
data.heldout_views = 2
data.image_size = 16
field.resolution = 8
render.samples = 8
fit.iterations = 300
fit.rays_per_step = 128
ae.width = 4
ae.steps = 3
unet.base_width = 4
unet.mults = 1,2
unet.time_dim = 8
decoder.D = 8
decoder.heads = 2
decoder.hidden = 8
train.iterations = 4
train.warmup_iters = 2
train.rays_per_step = 32
train.views_per_step = 2
sample.count = 2
sample.views = 1
interp.frames = 3
diffusion.steps = 3
metrics.points = 32
";

fn voxpart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxpart"))
        .args(args)
        .env_remove("VOXPART_CONFIG")
        .output()
        .expect("spawn voxpart")
}

fn ok(args: &[&str]) -> String {
    let out = voxpart(args);
    assert!(
        out.status.success(),
        "voxpart {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tiny_run(dir: &Path) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let cfg = dir.join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.join("run");
    let run_s = run.to_str().unwrap();
    ok(&["make-data", "--out", run_s, "--seed", "3", "--config", cfg.to_str().unwrap()]);
    run
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tiny_run(tmp.path());
    let r = run.to_str().unwrap();

    let table = ok(&["fit", "--out", r]);
    assert!(table.lines().count() == 3, "{table}");
    for line in table.lines().skip(1) {
        let psnr: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
        assert!(psnr.is_finite());
    }
    let again = ok(&["fit", "--out", r]);
    assert!(again.contains("skipped"), "{again}");

    ok(&["train", "--out", r]);
    let log = fs::read_to_string(run.join("train_loss.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows.len(), 1 + 4);
    let norm_col = rows[0].split(',').position(|c| c == "decoder_grad_norm").unwrap();
    for (i, row) in rows[1..].iter().enumerate() {
        let norm: f64 = row.split(',').nth(norm_col).unwrap().parse().unwrap();
        assert_eq!(norm == 0.0, i < 2, "row {i}: {row}");
    }

    ok(&["sample", "--out", r]);
    for i in 0..2 {
        assert!(run.join(format!("samples/sample_{i:03}.vxf")).is_file());
        assert!(run.join(format!("samples/sample_{i:03}_view_00_part.pgm")).is_file());
    }
    ok(&["sample", "--out", r, "--steps", "5", "--name", "samples5"]);

    ok(&["interp", "--out", r, "--a", "0", "--b", "1"]);
    let read = |p: &str| fs::read(run.join(p)).unwrap();
    assert_eq!(read("interp/frame_00_view_00.ppm"), read("samples/sample_000_view_00.ppm"));
    assert_eq!(read("interp/frame_02_view_00.ppm"), read("samples/sample_001_view_00.ppm"));
    assert_eq!(read("interp/frame_00.vxf"), read("samples/sample_000.vxf"));

    let a = run.join("fields/obj_000.vxf");
    let b = run.join("fields/obj_001.vxf");
    ok(&["mix", "--out", r, "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap(), "--assign", "seat=a,legs=b"]);
    assert!(run.join("mix/mixed.vxf").is_file());
    let bad = voxpart(&["mix", "--out", r, "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap(), "--assign", "wing=a"]);
    assert_eq!(bad.status.code(), Some(2));

    let fields = run.join("fields");
    let same = ok(&["eval", "--out", r, "--gen", fields.to_str().unwrap(), "--ref", fields.to_str().unwrap()]);
    assert!(same.contains("mmd x100 = 0.0000") && same.contains("cov x100 = 100.0"), "{same}");
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("set_name,mmd_x100,cov_x100,n_gen,n_ref\nsamples,"), "{csv}");
    // A four-step model generates nothing above the occupancy threshold.
    let empty = voxpart(&["eval", "--out", r]);
    assert_eq!(empty.status.code(), Some(3));
    assert!(stderr(&empty).contains("sample_000.vxf: empty shape"), "{}", stderr(&empty));
}

#[test]
fn make_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny_run(&tmp.path().join("a"));
    let b = tiny_run(&tmp.path().join("b"));
    let files = |root: &Path| {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    };
    assert_eq!(files(&a), files(&b));
}

#[test]
fn errors_are_prefixed_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();

    let zero = voxpart(&["make-data", "--out", r, "--objects", "0"]);
    assert!(!zero.status.success());
    assert!(stderr(&zero).starts_with("error:") && stderr(&zero).contains("need at least one object"));

    let typo = voxpart(&["fit", "--out", r, "--set", "fit.lrr=1"]);
    assert_eq!(typo.status.code(), Some(2));
    assert!(stderr(&typo).starts_with("error:") && stderr(&typo).contains("fit.lrr"));

    let missing = voxpart(&["fit", "--out", r]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(stderr(&missing).contains("make-data"));

    let usage = voxpart(&["sample", "--count", "many"]);
    assert_eq!(usage.status.code(), Some(2));
}
