use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[geometry]
grid = 8
patch_edge = 4
corpus_count = 12
surface_points = 64

[codec]
k = 6
n_z = 4
warmup_epochs = 3
epochs = 3
batch = 16

[schedule]
t_max = 6

[denoiser]
channels = 8
blocks = 1
mfm_layers = 1
heads = 2
mlp_ratio = 2

[training]
steps = 6
batch = 4

[sampling]
n_samples = 3
";

fn voxdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxdiff")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_corpus_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = voxdiff(&["gen-corpus", "--count", "8", "--seed", "1", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (da, db) = (dir_bytes(&a.join("corpus")), dir_bytes(&b.join("corpus")));
    assert_eq!(da.len(), 9);
    assert_eq!(da, db);
    for (name, bytes) in &da {
        if name.ends_with(".tsdf") {
            assert_eq!(&bytes[..5], b"TSDF1");
        }
    }
    let manifest = fs::read_to_string(a.join("manifest-gen-corpus.txt")).unwrap();
    for key in ["config_hash = ", "seed = 1", "voxdiff_version = ", "wall_time_s = "] {
        assert!(manifest.contains(key), "{manifest}");
    }
}

#[test]
fn sample_without_checkpoint_names_train_diffusion() {
    let tmp = tempfile::tempdir().unwrap();
    let o = voxdiff(&["sample", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train-diffusion"), "{}", stderr(&o));
    let o = voxdiff(&["train-vq", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gen-corpus"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(code(&voxdiff(&["no-such-command"])), 1);
    assert_eq!(code(&voxdiff(&["sample", "--seed", "x", "--out", out])), 1);
    assert_eq!(code(&voxdiff(&["gen-corpus", "--threads", "0", "--out", out])), 1);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "[training]\nstepz = 3\n").unwrap();
    let o = voxdiff(&["gen-corpus", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));
    assert_eq!(code(&voxdiff(&["--help"])), 0);
}

#[test]
fn bad_magic_names_file_and_expected_magic() {
    let tmp = tempfile::tempdir().unwrap();
    let bogus = tmp.path().join("bogus.tsdf");
    fs::write(&bogus, b"NOPE!\0\0\0\0\0\0").unwrap();
    let o = voxdiff(&["spectrum", "--input", tmp.path().to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("bogus.tsdf") && e.contains("TSDF1"), "{e}");
}

#[test]
fn tiny_pipeline_runs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = tmp.path().join("run");
    let (cfg_s, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let shape = out.join("corpus/shape-0000.tsdf");
    let shape_s = shape.to_str().unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen-corpus"],
        vec!["train-vq"],
        vec!["tokenize"],
        vec!["train-diffusion"],
        vec!["sample"],
        vec!["complete", "--input", shape_s],
        vec!["denoise", "--input", shape_s, "--noise", "uniform"],
        vec!["edit", "--input", shape_s, "--label", "1"],
        vec!["eval"],
        vec!["spectrum"],
    ];
    for step in &steps {
        let mut args = step.clone();
        args.extend(["--config", cfg_s, "--out", out_s, "--seed", "5", "--threads", "1"]);
        let o = voxdiff(&args);
        assert_eq!(code(&o), 0, "{step:?}: {}", stderr(&o));
        assert!(out.join(format!("manifest-{}.txt", step[0])).exists());
    }
    let first = dir_bytes(&out.join("samples"));
    assert_eq!(first.len(), 6);
    let schedule = fs::read_to_string(out.join("denoiser/schedule.tsv")).unwrap();
    assert_eq!(schedule.lines().count(), 8);
    let metrics = fs::read_to_string(out.join("eval/metrics.txt")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("1-NNA\t")), "{metrics}");
    let o = voxdiff(&["sample", "--config", cfg_s, "--out", out_s, "--seed", "5"]);
    assert_eq!(code(&o), 0);
    assert_eq!(dir_bytes(&out.join("samples")), first);
}
