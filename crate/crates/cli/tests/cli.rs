use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use cast_core::model::{CastModel, Variant};
use cast_core::runner::decode_pgm;
use cast_core::Tensor;

const SMOKE: &str = "[synth]\nn_train = 16\nn_val = 8\nn_test = 8\n\
                     [training]\nmax_epochs = 1\nbatch_size = 8\n\
                     [output]\ndir = out\n";

fn cast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cast")).args(args).output().expect("spawn cast")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    files
}

#[test]
fn gen_writes_manifest_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let o = ok(cast(&["gen", "--config", &cfg, "--out", s(&a)]));
    let manifest = a.join("manifest.tsv");
    assert_eq!(stdout(&o).trim(), manifest.display().to_string());
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 32);
    ok(cast(&["gen", "--config", &cfg, "--out", s(&b)]));
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let c = tmp.path().join("c");
    ok(cast(&["gen", "--config", &cfg, "--seed", "9", "--out", s(&c)]));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));

    ok(cast(&["gen", "--config", &cfg]));
    assert!(tmp.path().join("out/data/manifest.tsv").is_file());
}

#[test]
fn malformed_config_exits_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[synth]\nn_train = 4\nn_vall = 2\n");
    let o = cast(&["gen", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_vall"), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "[training]\nlr = fast\n");
    let o = cast(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lr"), "{}", stderr(&o));

    assert_eq!(code(&cast(&["gen", "--config", s(&tmp.path().join("none.cfg"))])), 2);
}

#[test]
fn train_smoke_and_repeatability() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    ok(cast(&["gen", "--config", &cfg]));
    let start = Instant::now();
    let o = ok(cast(&["train", "--config", &cfg]));
    assert!(start.elapsed().as_secs() < 60);
    assert!(stdout(&o).starts_with("best epoch 1 val_loss "), "{}", stdout(&o));
    assert!(stderr(&o).contains("epoch   1"), "{}", stderr(&o));
    let first = tmp.path().join("out/train");
    assert!(first.join("best.ckpt").is_file());

    let second = tmp.path().join("again");
    ok(cast(&["train", "--config", &cfg, "--out", s(&second)]));
    assert_eq!(dir_bytes(&first), dir_bytes(&second));

    let missing = cast(&["train", "--config", &cfg, "--manifest", s(&tmp.path().join("nope.tsv"))]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("nope.tsv"), "{}", stderr(&missing));
}

#[test]
fn eval_reports_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    ok(cast(&["gen", "--config", &cfg]));
    ok(cast(&["train", "--config", &cfg]));

    let o = ok(cast(&["eval", "--config", &cfg]));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2);
    for (line, tag) in lines.iter().zip(["ACC ", "AUC "]) {
        let v = line.strip_prefix(tag).unwrap_or_else(|| panic!("{line}"));
        assert_eq!(v.split('.').nth(1).map(str::len), Some(4), "{line}");
        assert!((0.0..=1.0).contains(&v.parse::<f64>().unwrap()));
    }
    let eval_dir = tmp.path().join("out/eval");
    let before = dir_bytes(&eval_dir);
    assert_eq!(before.len(), 3);
    ok(cast(&["eval", "--config", &cfg]));
    assert_eq!(before, dir_bytes(&eval_dir));
    let roc = std::fs::read_to_string(eval_dir.join("roc.tsv")).unwrap();
    assert_eq!(roc.lines().next(), Some("0\t0"));
    assert_eq!(roc.lines().last(), Some("1\t1"));

    let manifest = tmp.path().join("out/data/manifest.tsv");
    let ckpt = tmp.path().join("out/train/best.ckpt");
    let mut zero = CastModel::<f64>::load(&ckpt).unwrap();
    let shape = zero.params.get("classifier.weight").unwrap().shape().to_vec();
    *zero.params.get_mut("classifier.weight").unwrap() = Tensor::zeros(&shape);
    let zero_path = tmp.path().join("zero.ckpt");
    zero.save(&zero_path).unwrap();
    let o = ok(cast(&[
        "eval",
        "--checkpoint",
        s(&zero_path),
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("zero_eval")),
    ]));
    assert!(stdout(&o).contains("AUC 0.5000"), "{}", stdout(&o));

    let mut small = zero.config.clone();
    small.height = 16;
    small.width = 16;
    let small_path = tmp.path().join("small.ckpt");
    CastModel::<f64>::init(small, 0).unwrap().save(&small_path).unwrap();
    let o = cast(&["eval", "--config", &cfg, "--checkpoint", s(&small_path)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    assert_eq!(code(&cast(&["eval", "--manifest", s(&manifest)])), 2);
    assert_eq!(code(&cast(&["eval", "--config", &cfg, "--checkpoint", s(&tmp.path().join("gone.ckpt"))])), 2);
}

#[test]
fn heatmap_writes_pgm_or_rejects_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMOKE);
    ok(cast(&["gen", "--config", &cfg]));
    let clip = tmp.path().join("out/data/test/00000.clip");
    assert!(clip.is_file(), "dataset layout changed");

    let full = tmp.path().join("full.ckpt");
    let model = CastModel::<f64>::init(Default::default(), 5).unwrap();
    model.save(&full).unwrap();
    let img = tmp.path().join("h.pgm");
    let o = ok(cast(&["heatmap", "--checkpoint", s(&full), "--clip", s(&clip), "--frame", "3", "--out", s(&img)]));
    assert_eq!(stdout(&o).trim(), img.display().to_string());
    let (w, h, px) = decode_pgm(&std::fs::read(&img).unwrap()).unwrap();
    assert_eq!((w, h, px.len()), (model.config.width, model.config.height, w * h));

    let nc = tmp.path().join("nc.ckpt");
    let cfg_nc = cast_core::model::CastConfig { variant: Variant::NoCrossAttention, ..Default::default() };
    CastModel::<f64>::init(cfg_nc, 5).unwrap().save(&nc).unwrap();
    let o = cast(&["heatmap", "--checkpoint", s(&nc), "--clip", s(&clip), "--frame", "0", "--out", s(&img)]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("no_cross_attention"), "{}", stderr(&o));
}

#[test]
fn ablate_single_seed_table() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "[synth]\nn_train = 8\nn_val = 4\nn_test = 8\nframes = 4\nheight = 16\nwidth = 16\n\
                [model]\nchannels = 4,8,8\nd = 8\nheads = 2\nfusion_heads = 2\nencoder_layers = 1\nclip_len = 4\nheight = 16\nwidth = 16\n\
                [ablate]\nvariants = no_cross_attention,full\nseeds = 0,1,2\nmax_epochs = 1\n";
    let cfg = write_config(tmp.path(), text);
    let o = ok(cast(&["ablate", "--config", &cfg, "--seed", "7"]));
    let table = std::fs::read_to_string(tmp.path().join("out/ablate/ablation.tsv")).unwrap();
    assert_eq!(stdout(&o), table);
    let keys: Vec<String> = table.lines().skip(1).map(|l| l.split('\t').take(2).collect::<Vec<_>>().join(" ")).collect();
    assert_eq!(keys, ["full 7", "full mean", "no_cross_attention 7", "no_cross_attention mean"]);
    assert!(tmp.path().join("out/ablate/full/seed7/shifted/scores.tsv").is_file());
}
