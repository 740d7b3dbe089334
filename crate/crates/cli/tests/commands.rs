use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hitdvae::data::{BodyEncoding, Corpus, Split};
use hitdvae::model::ModelConfig;
use hitdvae::pipeline::RunConfig;
use serde_json::Value;

fn hitdvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hitdvae"))
        .args(args)
        .env("HITDVAE_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn hitdvae")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A corpus and schedule small enough for a few seconds of training.
fn tiny_config() -> RunConfig {
    let mut c = RunConfig::small(3);
    c.corpus.clips_per_class = 30;
    c.corpus.frames = 16;
    c.schedule.frames = 16;
    c.schedule.observed = 6;
    c.schedule.w_window = 4;
    c.schedule.epochs = 2;
    c.schedule.samples_per_epoch = 4;
    c.schedule.batch_size = 2;
    c.schedule.samples = 2;
    c.schedule.checkpoint_every = 1;
    c.model = ModelConfig::micro(9, 4);
    c.flow.steps = 20;
    c.classifier.epochs = 1;
    c.classifier.hidden = 8;
    c
}

fn write_config(dir: &Path, config: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

#[test]
fn shipped_config_is_the_small_preset() {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/small.json")).unwrap();
    let c: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(c, RunConfig::small(1));
}

#[test]
fn synth_twice_gives_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ha = ok(&hitdvae(&["synth", "--seed", "1", "--out", p(&a)]));
    let hb = ok(&hitdvae(&["synth", "--seed", "1", "--out", p(&b)]));
    assert_eq!(ha, hb);
    for file in ["manifest.json", "run.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let (corpus, manifest) = Corpus::load(&a).unwrap();
    assert_eq!(corpus.clips.len(), 400);
    assert_eq!(manifest.seed, 1);
    let other = ok(&hitdvae(&["synth", "--seed", "2", "--out", p(&dir.path().join("c"))]));
    assert_ne!(ha, other);
}

#[test]
fn gradcheck_reports_small_error() {
    let out = ok(&hitdvae(&["gradcheck"]));
    let v: Value = serde_json::from_str(out.trim()).unwrap();
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4, "{v}");
    assert_eq!(v["pass"], Value::Bool(true));
}

#[test]
fn unknown_flag_is_a_json_error() {
    let out = hitdvae(&["synth", "--seed", "1", "--out", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "usage");
    assert!(e["error"]["message"].as_str().unwrap().contains("--bogus"));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(tiny_config()).unwrap();
    v["model"]["dz"] = 3.into();
    let path = dir.path().join("bad.json");
    fs::write(&path, v.to_string()).unwrap();
    let out = hitdvae(&["pretrain-flow", "--config", p(&path), "--corpus", "c", "--out", "o"]);
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("dz"), "{e}");

    let mut v = serde_json::to_value(tiny_config()).unwrap();
    v["weights"].as_object_mut().unwrap().remove("limb");
    fs::write(&path, v.to_string()).unwrap();
    let out = hitdvae(&["pretrain-flow", "--config", p(&path), "--corpus", "c", "--out", "o"]);
    let msg = error_json(&out)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("limb"), "{msg}");
}

#[test]
fn eval_of_perfect_copies_has_zero_best_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let cfg = write_config(dir.path(), &config);
    let corpus_dir = dir.path().join("corpus");
    ok(&hitdvae(&["synth", "--seed", "3", "--config", p(&cfg), "--out", p(&corpus_dir)]));

    // A generations directory whose two samples per clip are the clip itself.
    let (corpus, _) = Corpus::load(&corpus_dir).unwrap();
    let gen_dir = dir.path().join("copies");
    let mut clips = Vec::new();
    for clip in corpus.split(Split::Test) {
        fs::create_dir_all(gen_dir.join(&clip.id)).unwrap();
        let files: Vec<String> = (0..2).map(|k| format!("{}/sample-{k:03}.clip", clip.id)).collect();
        for f in &files {
            clip.save(gen_dir.join(f), BodyEncoding::Base64).unwrap();
        }
        clips.push(serde_json::json!({"clip": clip.id, "label": clip.label, "seeds": [0, 1], "files": files}));
    }
    let manifest = serde_json::json!({
        "build": "test", "checkpoint_sha256": "", "corpus_sha256": "", "config": config, "seed": 0,
        "obs_frames": config.schedule.observed, "horizon": null, "samples": 2, "mode": "sample",
        "posterior_mean": false, "context_cap": null, "clips": clips,
    });
    fs::write(gen_dir.join("generations.json"), manifest.to_string()).unwrap();

    let out_dir = dir.path().join("eval");
    let out = ok(&hitdvae(&[
        "eval", "--config", p(&cfg), "--corpus", p(&corpus_dir), "--generations", p(&gen_dir), "--out",
        p(&out_dir), "--skip-classifier",
    ]));
    let mut lines = out.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("ADEb").parse::<f64>().unwrap(), 0.0);
    assert_eq!(col("FDEb").parse::<f64>().unwrap(), 0.0);
    assert_eq!(col("APD").parse::<f64>().unwrap(), 0.0);
    assert_eq!(fs::read_to_string(out_dir.join("metrics.csv")).unwrap(), out);
    assert!(out_dir.join("run.json").exists());
}

#[test]
fn full_pipeline_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let cfg = write_config(dir.path(), &config);
    let d = |name: &str| dir.path().join(name);
    ok(&hitdvae(&["synth", "--seed", "3", "--config", p(&cfg), "--out", p(&d("corpus"))]));
    ok(&hitdvae(&["pretrain-flow", "--config", p(&cfg), "--corpus", p(&d("corpus")), "--out", p(&d("flow"))]));
    let prior = d("flow").join("prior.ckpt");
    ok(&hitdvae(&[
        "train", "--config", p(&cfg), "--corpus", p(&d("corpus")), "--flow", p(&prior), "--out", p(&d("run")),
        "--seed", "5",
    ]));
    let run = d("run");
    for f in ["manifest.json", "run.json", "losses.csv", "model.ckpt", "checkpoint-0001.ckpt", "checkpoint-0002.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // Resuming from the first checkpoint reproduces the final weights exactly.
    ok(&hitdvae(&[
        "train", "--config", p(&cfg), "--corpus", p(&d("corpus")), "--flow", p(&prior), "--out", p(&d("resumed")),
        "--seed", "5", "--checkpoint", p(&run.join("checkpoint-0001.ckpt")),
    ]));
    assert_eq!(fs::read(run.join("model.ckpt")).unwrap(), fs::read(d("resumed").join("model.ckpt")).unwrap());

    let model = run.join("model.ckpt");
    let (corpus, _) = Corpus::load(d("corpus")).unwrap();
    let clip = corpus.split(Split::Train).next().unwrap().id.clone();
    let gen_args = |out: &str, horizon: &str| {
        hitdvae(&[
            "generate", "--config", p(&cfg), "--checkpoint", p(&model), "--corpus", p(&d("corpus")), "--out",
            p(&d(out)), "--samples", "3", "--seed", "9", "--horizon", horizon, "--clip", &clip,
            "--split", "train",
        ])
    };
    ok(&gen_args("gen", "10"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(d("gen").join("generations.json")).unwrap()).unwrap();
    assert_eq!(manifest["clips"][0]["files"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["clips"][0]["seeds"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["checkpoint_sha256"].as_str().unwrap().len(), 64);
    let svg = d("sheet.svg");
    ok(&hitdvae(&[
        "render", "--clip", p(&d("gen").join(&clip).join("sample-000.clip")), "--clip",
        p(&d("gen").join(&clip).join("sample-001.clip")), "--frames", "0,8,15", "--out", p(&svg),
    ]));
    assert!(fs::read_to_string(&svg).unwrap().contains("<svg"));

    let out = ok(&hitdvae(&[
        "eval", "--config", p(&cfg), "--corpus", p(&d("corpus")), "--checkpoint", p(&model), "--out",
        p(&d("eval")), "--samples", "2", "--seed", "1",
    ]));
    let row: Vec<f64> = out.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row.len(), 11);
    assert!(row.iter().all(|v| v.is_finite()));
}

#[test]
fn checkpoint_config_mismatch_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config();
    let cfg = write_config(dir.path(), &config);
    ok(&hitdvae(&["synth", "--seed", "3", "--config", p(&cfg), "--out", p(&dir.path().join("corpus"))]));
    let model = hitdvae::HitDvae::new(config.model.clone(), 0).unwrap();
    let ck = dir.path().join("m.ckpt");
    model.params.to_checkpoint().save(&ck).unwrap();
    config.model.d_z += 1;
    let cfg = write_config(dir.path(), &config);
    let out = hitdvae(&[
        "generate", "--config", p(&cfg), "--checkpoint", p(&ck), "--corpus", p(&dir.path().join("corpus")),
        "--out", p(&dir.path().join("g")), "--samples", "1", "--seed", "0",
    ]);
    let msg = error_json(&out)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("does not fit the `model` section"), "{msg}");
}
