use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emrrg::{checkpoint, dataset};
use emrrg_core::corpus::{generate, SyntheticSpec};
use emrrg_core::Session;
use tempfile::TempDir;

fn emrrg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emrrg"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert_eq!(
        code(&o),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: u64, n: usize) -> PathBuf {
    let out = dir.join(format!("data-{seed}-{n}"));
    ok(emrrg(&[
        "gen-data",
        "--out",
        s(&out),
        "--seed",
        &seed.to_string(),
        "--samples",
        &n.to_string(),
        "--image-size",
        "32",
    ]));
    out
}

const SMALL_MODEL: &str = r#"
[model.encoder]
image_size = 32
patch_size = 16
channels = 1
d_model = 16
n_blocks = 1
d_state = 4
dt_rank = 4
[model.lm]
d = 16
n_layers = 2
n_heads = 2
d_ff = 24
hybrid_indices = [HYBRID]
max_seq_len = 96
[[model.adapters]]
target = "in_proj"
slice = "X"
rank = 2
[[model.adapters]]
target = "embedding"
rank = 2
[train]
epochs = 1
batch_size = 4
max_steps = 3
"#;

fn write_config(dir: &Path, data: &Path, out: &str, hybrid: &str) -> PathBuf {
    let path = dir.join(format!("{out}.toml"));
    let text = format!(
        "dataset = {:?}\nout = {:?}\n{}",
        s(data),
        s(&dir.join(out)),
        SMALL_MODEL.replace("HYBRID", hybrid)
    );
    fs::write(&path, text).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_reproducible_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let a = gen(tmp.path(), 4, 30);
    let b = tmp.path().join("again");
    ok(emrrg(&[
        "gen-data",
        "--out",
        s(&b),
        "--seed",
        "4",
        "--samples",
        "30",
        "--image-size",
        "32",
    ]));
    assert_eq!(files(&a), files(&b));

    let loaded = dataset::load(&a).unwrap();
    let spec = SyntheticSpec {
        n_samples: 30,
        image_size: 32,
        seed: 4,
        ..SyntheticSpec::default()
    };
    assert_eq!(loaded.data, generate(&spec).unwrap());
    assert_eq!(loaded.manifest.counts.values().sum::<usize>(), 30);
}

#[test]
fn corrupted_data_exits_with_io_code() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 1, 20);
    let img = data.join("train.img");
    let mut bytes = fs::read(&img).unwrap();
    bytes[60] ^= 0x01;
    fs::write(&img, &bytes).unwrap();
    assert!(matches!(
        dataset::load(&data),
        Err(emrrg::error::AppError::Corrupt { .. })
    ));
    let cfg = write_config(tmp.path(), &data, "run", "1");
    assert_eq!(code(&emrrg(&["train", "--config", s(&cfg)])), 1);

    bytes.truncate(40);
    assert!(dataset::decode_images(&img, &bytes).is_err());
    let missing = tmp.path().join("nowhere");
    let cfg = write_config(tmp.path(), &missing, "run2", "1");
    assert_eq!(code(&emrrg(&["train", "--config", s(&cfg)])), 1);
}

#[test]
fn config_errors_exit_before_any_work() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 2, 20);
    let cfg = write_config(tmp.path(), &data, "bad", "2");
    let o = emrrg(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hybrid index 2"));
    assert!(!tmp.path().join("bad").exists());

    let cfg = write_config(tmp.path(), &data, "ok", "1");
    assert_eq!(
        code(&emrrg(&["ablate", "--config", s(&cfg), "--grid", "table6"])),
        2
    );
    let o = Command::new(env!("CARGO_BIN_EXE_emrrg"))
        .args(["ablate", "--config", s(&cfg), "--grid", "table5"])
        .env("EMRRG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);

    let unknown = tmp.path().join("unknown.toml");
    fs::write(
        &unknown,
        format!(
            "dataset = {:?}\nout = \"x\"\nlearning_rate = 1.0\n",
            s(&data)
        ),
    )
    .unwrap();
    assert_eq!(code(&emrrg(&["train", "--config", s(&unknown)])), 2);
    assert_eq!(
        code(&emrrg(&[
            "generate",
            "--checkpoint",
            "nope.emrrg",
            "--data",
            s(&data)
        ])),
        1
    );
}

#[test]
fn train_generate_eval_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 3, 24);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let cfg = write_config(tmp.path(), &data, run, "1");
        let stdout = ok(emrrg(&["train", "--config", s(&cfg)])).stdout;
        let dir = tmp.path().join(run);
        let ckpt = dir.join("checkpoint.emrrg");
        let preds = dir.join("test.jsonl");
        ok(emrrg(&[
            "generate",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--split",
            "test",
            "--out",
            s(&preds),
        ]));
        let eval = ok(emrrg(&[
            "eval",
            "--predictions",
            s(&preds),
            "--references",
            s(&data.join("test.jsonl")),
        ]))
        .stdout;
        let mut f = files(&dir);
        f.retain(|(n, _)| n != "train_log.jsonl");
        outputs.push((stdout, f, eval));
    }
    assert_eq!(outputs[0], outputs[1]);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(
        manifest["trainable_params"],
        manifest["predicted_trainable"]
    );
    assert_eq!(manifest["steps"], 3);
    let log = fs::read_to_string(tmp.path().join("a/train_log.jsonl")).unwrap();
    assert!(log
        .lines()
        .all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
}

#[test]
fn checkpoint_round_trip_and_schema_guard() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 5, 20);
    let cfg = write_config(tmp.path(), &data, "run", "0");
    ok(emrrg(&["train", "--config", s(&cfg)]));
    let path = tmp.path().join("run/checkpoint.emrrg");
    let bytes = fs::read(&path).unwrap();
    let (model, vocab) = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&model, &vocab).unwrap(), bytes);
    let (again, _) = checkpoint::from_bytes(&path, &bytes).unwrap();
    let img = dataset::load(&data).unwrap().data.test[0].image.clone();
    let logits = |m: &emrrg_core::EmrrgModel| {
        let mut s = Session::new(&m.params, &m.adapters);
        let l = m.forward_logits(&mut s, &img, &[5], &[6, 7]).unwrap();
        s.tape.value(l).clone()
    };
    assert_eq!(logits(&model), logits(&again));

    let mut bumped = bytes.clone();
    bumped[8] = 2;
    let bad = tmp.path().join("bumped.emrrg");
    fs::write(&bad, &bumped).unwrap();
    let err = checkpoint::load(&bad).unwrap_err().to_string();
    assert!(err.contains("schema version 2"), "{err}");
    assert_eq!(
        code(&emrrg(&[
            "generate",
            "--checkpoint",
            s(&bad),
            "--data",
            s(&data)
        ])),
        1
    );

    let mut flipped = bytes;
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    assert!(checkpoint::from_bytes(&bad, &flipped).is_err());
}

#[test]
fn empty_split_and_eval_alignment() {
    let tmp = TempDir::new().unwrap();
    let data_dir = tmp.path().join("data");
    let spec = SyntheticSpec {
        n_samples: 10,
        image_size: 32,
        seed: 9,
        split_ratios: [0.8, 0.2, 0.0],
    };
    dataset::save(&data_dir, &spec, &generate(&spec).unwrap()).unwrap();
    let cfg = write_config(tmp.path(), &data_dir, "run", "1");
    ok(emrrg(&["train", "--config", s(&cfg)]));
    let ckpt = tmp.path().join("run/checkpoint.emrrg");
    let out = ok(emrrg(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data_dir),
        "--split",
        "test",
    ]));
    assert!(out.stdout.is_empty());
    let bad_split = emrrg(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data_dir),
        "--split",
        "dev",
    ]);
    assert_eq!(code(&bad_split), 2);

    let preds = tmp.path().join("preds.jsonl");
    fs::write(
        &preds,
        "{\"id\":\"x-1\",\"prediction\":\"heart size is normal.\"}\n",
    )
    .unwrap();
    let o = emrrg(&[
        "eval",
        "--predictions",
        s(&preds),
        "--references",
        s(&data_dir.join("val.jsonl")),
    ]);
    assert_eq!(code(&o), 2);

    let inline = tmp.path().join("inline.jsonl");
    fs::write(
        &inline,
        "{\"id\":\"a\",\"prediction\":\"no pleural effusion.\",\"reference\":\"no pleural effusion.\"}\n\
         {\"id\":\"b\",\"prediction\":\"heart size is normal.\",\"reference\":\"heart size is normal.\"}\n",
    )
    .unwrap();
    let o = ok(emrrg(&["eval", "--predictions", s(&inline)]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("1.0000"));
}
