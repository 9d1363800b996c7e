use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtfatt::dataio::{self, Stem, SynthSpec};
use mtfatt::metrics::sdr;
use mtfatt::model::{ModelConfig, SeparationModel};
use mtfatt::Tensor;

fn mtfatt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtfatt"))
        .args(args)
        .env_remove("MTFATT_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run mtfatt")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

/// A tiny synthetic run: 4 songs of 3 s, two batches per epoch.
fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    let body = format!(
        "data.synth_songs = 4\ndata.synth_train = 2\ndata.synth_val = 1\ndata.synth_duration = 3\n\
         train.epochs = 1\ntrain.max_batches_per_epoch = 2\n\
         paths.checkpoint_dir = {}\npaths.output_dir = {}\n",
        dir.join("ckpt").display(),
        dir.join("out").display()
    );
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.epochs = 1\ntrain.epoch = 2\n").unwrap();
    let out = mtfatt(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    assert!(text(&out).contains("train.epoch"));
}

#[test]
fn missing_dataset_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("d.cfg");
    let missing = dir.path().join("no-such-dataset");
    fs::write(&cfg, format!("data.source = directory\npaths.dataset_root = {}\n", missing.display())).unwrap();
    let out = mtfatt(&["train", "--config", s(&cfg), "--stem", "vocals", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains(s(&missing)), "{}", text(&out));
}

#[test]
fn unknown_variant_lists_valid_ones() {
    let out = mtfatt(&["evaluate", "--variant", "bigAtt"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = text(&out);
    for v in ["noAtt", "FAtt", "TAtt", "TFAtt", "MTFAtt"] {
        assert!(msg.contains(v), "{msg}");
    }
}

#[test]
fn zero_epochs_keeps_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = mtfatt(&["train", "--config", s(&cfg), "--stem", "synthetic-vocals", "--epochs", "0", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let report = fs::read_to_string(dir.path().join("out/train-MTFAtt-vocals.txt")).unwrap();
    assert!(report.is_empty());
    let expected_dir = tempfile::tempdir().unwrap();
    let expected = expected_dir.path().join("init.ckpt");
    let model = SeparationModel::<f32>::build(ModelConfig { seed: 4, ..ModelConfig::desk_scale() }).unwrap();
    dataio::save_checkpoint(&model, &expected).unwrap();
    assert_eq!(fs::read(dir.path().join("ckpt/MTFAtt-vocals.ckpt")).unwrap(), fs::read(expected).unwrap());

    let echoed = fs::read_to_string(dir.path().join("out/run.cfg")).unwrap();
    assert!(echoed.contains("train.epochs = 0") && echoed.contains("model.seed = 4"));
}

#[test]
fn train_separate_evaluate_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = mtfatt(&["train", "--config", s(&cfg), "--stem", "synthetic-vocals", "--variant", "TFAtt"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let report = fs::read_to_string(dir.path().join("out/train-TFAtt-vocals.txt")).unwrap();
    assert_eq!(report.lines().count(), 1);

    let eval = |out_dir: &str| {
        let o = mtfatt(&[
            "evaluate", "--config", s(&cfg), "--stem", "synthetic-vocals", "--variant", "TFAtt", "--out", out_dir,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
        fs::read_to_string(Path::new(out_dir).join("eval-TFAtt-test.tsv")).unwrap()
    };
    let e1 = dir.path().join("e1");
    let records = eval(s(&e1));
    assert_eq!(records, eval(s(&dir.path().join("e2"))));
    let table = fs::read_to_string(e1.join("eval-TFAtt-test.txt")).unwrap();
    assert!(table.contains("vocals") && table.contains("All"));

    // The single test song of the tiny config is song index 3.
    let songs = dataio::synth_dataset(&SynthSpec::disjoint(4000), 4, 3.0, 1234).unwrap();
    let song = &songs[3];
    let wav = dir.path().join("mix.wav");
    dataio::write_wav(&wav, &song.mixture, 4000).unwrap();
    let sep_dir = dir.path().join("sep");
    let o = mtfatt(&[
        "separate", "--config", s(&cfg), "--stem", "synthetic-vocals", "--variant", "TFAtt", "--input", s(&wav),
        "--out", s(&sep_dir),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let (est, rate) = dataio::read_wav(&sep_dir.join("vocals.wav")).unwrap();
    assert_eq!((est.shape(), rate), (song.mixture.shape(), 4000));
    let direct = sdr(song.stem(Stem::Vocals), &est).unwrap();
    let line = records.lines().find(|l| l.starts_with("song=")).unwrap();
    let reported: f64 = line.rsplit("sdr=").next().unwrap().parse().unwrap();
    assert!((direct - reported).abs() < 0.1, "{direct} vs {reported}");

    let silence = dir.path().join("silence.wav");
    dataio::write_wav(&silence, &Tensor::zeros(&[5000, 2]), 4000).unwrap();
    let quiet = dir.path().join("quiet");
    let o = mtfatt(&[
        "separate", "--config", s(&cfg), "--stem", "synthetic-vocals", "--variant", "TFAtt", "--input", s(&silence),
        "--out", s(&quiet),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let (y, _) = dataio::read_wav(&quiet.join("vocals.wav")).unwrap();
    assert_eq!(y.shape(), [5000, 2]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn selftest_exit_status_follows_groups() {
    let out = mtfatt(&["selftest", "--corrupt-softmax-scale", "--threads", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = text(&out);
    assert!(msg.contains("FAIL attention oracles"), "{msg}");
    assert!(msg.contains("PASS shape ledger") && msg.contains("PASS stft round trip"), "{msg}");

    let out = mtfatt(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert_eq!(text(&out).matches("PASS").count(), 4);
}
