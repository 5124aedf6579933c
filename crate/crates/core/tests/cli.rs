mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use convtx::audio::{to_pcm_s16le, Dataset};
use convtx::cli::{checkpoint_name, hypothesis_text};
use convtx::decode::{beam_search, format_hypotheses, ModelScorer, SearchOptions};
use convtx::model::{preset, Checkpoint, Header, Model};
use convtx::tensor::{Precision, PrecisionGuard};

fn convtx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convtx"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = convtx(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic corpus plus ready config in a fresh directory.
fn synth(n: usize) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "synth",
        "--out-dir",
        p(dir.path()),
        "--utterances",
        &n.to_string(),
        "--seed",
        "3",
    ]);
    let cfg = dir.path().join("toy.cfg");
    (dir, cfg)
}

fn checkpoints_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    names.sort();
    names
}

#[test]
fn train_writes_one_numbered_checkpoint_per_epoch() {
    let (dir, cfg) = synth(12);
    ok(&["train", "--config", p(&cfg), "epochs=20"]);
    let ck = dir.path().join("checkpoints");
    let want: Vec<String> = (1..=20).map(checkpoint_name).collect();
    assert_eq!(checkpoints_in(&ck), want);
    let log = std::fs::read_to_string(ck.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 20);
    assert!(log.lines().last().unwrap().starts_with("epoch=20 "));
    let saved = std::fs::read_to_string(ck.join("run.cfg")).unwrap();
    assert!(saved.contains("epochs = 20"));
}

#[test]
fn zero_epochs_succeeds_without_checkpoints() {
    let (dir, cfg) = synth(4);
    ok(&["train", "--config", p(&cfg), "epochs=0"]);
    assert!(checkpoints_in(&dir.path().join("checkpoints")).is_empty());
}

#[test]
fn repeated_training_is_bit_identical() {
    let (dir, cfg) = synth(10);
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "epochs=2",
        "checkpoint_dir=\"a\"",
    ]);
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "epochs=2",
        "checkpoint_dir=\"b\"",
    ]);
    let read = |sub: &str| std::fs::read(dir.path().join(sub).join(checkpoint_name(2))).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn config_errors_name_the_key() {
    let (_dir, cfg) = synth(2);
    let out = convtx(&["train", "--config", p(&cfg), "model.d_modle=8"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.d_modle"));

    let out = convtx(&["train", "--config", p(&cfg), "model.heads=5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.heads"));
}

#[test]
fn non_finite_loss_exits_with_status_two() {
    let (dir, cfg) = synth(4);
    let path = dir.path().join("train.data");
    let mut data = Dataset::read(&path).unwrap();
    data.utterances[1].features.data_mut()[0] = f64::INFINITY;
    data.write(&path).unwrap();
    let out = convtx(&["train", "--config", p(&cfg), "epochs=1"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(convtx(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(convtx(&["score", "only-one"]).status.code(), Some(1));
    let help = convtx(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("average"));
}

/// Checkpoint files hold 32-bit values; one rounding of `x` moves it at most this far.
fn f32_step(x: f64) -> f64 {
    f64::from(f32::EPSILON) * x.abs()
}

fn write_checkpoint(path: &Path, model: &Model) {
    Checkpoint::from_model(model, Header::new(vec![]))
        .write(path)
        .unwrap();
}

#[test]
fn average_uses_the_newest_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let toy = preset("toy").unwrap();
    for e in 1..=80 {
        write_checkpoint(
            &dir.path().join(checkpoint_name(e)),
            &Model::new(toy.clone(), e as u64).unwrap(),
        );
    }
    let out = dir.path().join("avg.ckpt");
    ok(&["average", "--dir", p(dir.path()), "--output", p(&out)]);
    let avg = Checkpoint::read(&out).unwrap();
    let listed: Vec<String> =
        serde_json::from_str(avg.header.get("checkpoint.averaged_from").unwrap()).unwrap();
    let want: Vec<String> = (51..=80).map(checkpoint_name).collect();
    assert_eq!(listed, want);

    // direct oracle on one parameter
    let name = "decoder.out.weight";
    let models: Vec<Model> = (51..=80)
        .map(|s| Model::new(toy.clone(), s).unwrap())
        .collect();
    for (i, v) in avg.params[name].data().iter().enumerate() {
        let mean = models
            .iter()
            .map(|m| m.params()[name].data()[i])
            .sum::<f64>()
            / 30.0;
        assert!((v - mean).abs() <= f32_step(mean));
    }
}

#[test]
fn average_of_identical_checkpoints_is_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::new(preset("toy").unwrap(), 9).unwrap();
    for e in 1..=5 {
        write_checkpoint(&dir.path().join(checkpoint_name(e)), &m);
    }
    let out = dir.path().join("avg.ckpt");
    ok(&[
        "average",
        "--dir",
        p(dir.path()),
        "--last-n",
        "30",
        "--output",
        p(&out),
    ]);
    assert_eq!(&Checkpoint::read(&out).unwrap().params, m.params());
}

#[test]
fn average_of_two_is_their_mean() {
    let dir = tempfile::tempdir().unwrap();
    let toy = preset("toy").unwrap();
    let (a, b) = (
        Model::new(toy.clone(), 1).unwrap(),
        Model::new(toy, 2).unwrap(),
    );
    write_checkpoint(&dir.path().join(checkpoint_name(1)), &a);
    write_checkpoint(&dir.path().join(checkpoint_name(2)), &b);
    let out = dir.path().join("avg.ckpt");
    ok(&["average", "--dir", p(dir.path()), "--output", p(&out)]);
    let avg = Checkpoint::read(&out).unwrap();
    for (name, t) in &avg.params {
        for (i, v) in t.data().iter().enumerate() {
            let want = (a.params()[name].data()[i] + b.params()[name].data()[i]) / 2.0;
            assert!((v - want).abs() <= f32_step(want), "{name}");
        }
    }
}

#[test]
fn average_of_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = convtx(&[
        "average",
        "--dir",
        p(dir.path()),
        "--output",
        p(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn decode_matches_the_library_and_scores() {
    let (dir, cfg) = synth(6);
    ok(&["train", "--config", p(&cfg), "epochs=2"]);
    let ck = dir.path().join("checkpoints").join(checkpoint_name(2));
    let (data, vocab) = (dir.path().join("train.data"), dir.path().join("vocab.txt"));
    let hyp = dir.path().join("hyp.txt");
    ok(&[
        "decode",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--vocab",
        p(&vocab),
        "--beam",
        "1",
        "--output",
        p(&hyp),
    ]);

    let model = Checkpoint::read(&ck).unwrap().to_model().unwrap();
    let dataset = Dataset::read(&data).unwrap();
    let vocab_t = convtx::text::Vocab::load(&vocab).unwrap();
    let _p = PrecisionGuard::new(Precision::F32);
    let records: Vec<(String, f64, String)> = dataset
        .utterances
        .iter()
        .map(|u| {
            let mut s = ModelScorer::new(&model, &u.features).unwrap();
            let opts = SearchOptions::new(1, s.default_max_len());
            let best = beam_search(&mut s, &opts).unwrap().best;
            (
                u.id.clone(),
                best.score,
                hypothesis_text(&vocab_t, &best.tokens).unwrap(),
            )
        })
        .collect();
    assert_eq!(
        std::fs::read_to_string(&hyp).unwrap(),
        format_hypotheses(&records)
    );

    // stdout output is identical across repeats
    let args = [
        "decode",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--vocab",
        p(&vocab),
        "--beam",
        "5",
    ];
    assert_eq!(ok(&args), ok(&args));

    let refs = dir.path().join("train.ref");
    let report = ok(&["score", p(&refs), p(&refs)]);
    assert!(
        report.lines().last().unwrap().ends_with("WER=0.00%"),
        "{report}"
    );
    let report = ok(&["score", p(&refs), p(&hyp), p(&refs), p(&refs)]);
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn decode_rejects_a_checkpoint_that_disagrees_with_its_config() {
    let (dir, _) = synth(3);
    let m = Model::new(preset("toy").unwrap(), 1).unwrap();
    let mut ck = Checkpoint::from_model(&m, Header::new(vec![]));
    ck.header.set("model.ffn_width", "48");
    let path = dir.path().join("bad.ckpt");
    ck.write(&path).unwrap();
    let out = convtx(&[
        "decode",
        "--checkpoint",
        p(&path),
        "--data",
        p(&dir.path().join("train.data")),
        "--vocab",
        p(&dir.path().join("vocab.txt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("encoder.block0.ffn.fc1.weight"), "{err}");
}

#[test]
fn info_reports_the_canonical_budget() {
    let out = ok(&["info", "--preset", "canonical"]);
    let total: usize = out
        .lines()
        .find(|l| l.starts_with("total"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    assert!((200_000_000..=250_000_000).contains(&total), "{out}");
    assert!(out.lines().count() > 4);
    let best = ok(&["info", "--preset", "best"]);
    assert!(best.contains("ffn_width=4096 enc_layers=16 dec_layers=6"));
    let small = ok(&["info", "--preset", "canonical", "model.enc_layers=0"]);
    assert_ne!(small, out);
}

#[test]
fn features_from_pcm_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<f64> = (0..16000).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect();
    std::fs::write(dir.path().join("a.pcm"), to_pcm_s16le(&samples)).unwrap();
    std::fs::write(
        dir.path().join("manifest.tsv"),
        "utt1\ta.pcm\thello world\n",
    )
    .unwrap();
    let out = dir.path().join("feats.data");
    ok(&[
        "features",
        "--manifest",
        p(&dir.path().join("manifest.tsv")),
        "--output",
        p(&out),
    ]);
    let data = Dataset::read(&out).unwrap();
    assert_eq!(data.utterances[0].features.shape(), &[98, 80]);
    assert_eq!(data.utterances[0].text, "hello world");
}
