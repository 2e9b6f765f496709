use emrrg_core::corpus::{generate, to_examples, SyntheticSpec};
use emrrg_core::model::{EmrrgModel, ModelConfig};
use emrrg_core::train::Example;
use emrrg_core::train::{fit, targets_and_mask, FitEvent, FitResult, TrainConfig};
use emrrg_core::vocab::{Vocabulary, PROMPT};
use emrrg_core::Session;

struct Setup {
    model: EmrrgModel,
    train: Vec<Example>,
    val: Vec<Example>,
    prompt: Vec<usize>,
    vocab: Vocabulary,
}

fn setup(n: usize) -> Setup {
    let data = generate(&SyntheticSpec {
        n_samples: n,
        image_size: 32,
        seed: 11,
        split_ratios: [0.75, 0.25, 0.0],
    })
    .unwrap();
    let vocab = data.vocabulary();
    let mut cfg = ModelConfig::desk(vocab.len());
    cfg.encoder.image_size = 32;
    cfg.encoder.d_model = 16;
    cfg.encoder.dt_rank = Some(4);
    cfg.encoder.d_state = 4;
    cfg.lm.d = 16;
    cfg.lm.d_ff = 24;
    cfg.lm.n_layers = 2;
    cfg.lm.hybrid_indices = vec![1];
    let model = EmrrgModel::new(&cfg).unwrap();
    Setup {
        model,
        train: to_examples(&data.train, &vocab),
        val: to_examples(&data.val, &vocab),
        prompt: vocab.encode(PROMPT),
        vocab,
    }
}

fn run(s: &mut Setup, tc: &TrainConfig) -> FitResult {
    fit(
        &mut s.model,
        &s.train,
        &s.val,
        &s.prompt,
        &s.vocab,
        tc,
        &mut |_| {},
    )
    .unwrap()
}

fn tc() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let mut s = setup(16);
    let before = s.model.params.snapshot();
    run(
        &mut s,
        &TrainConfig {
            learning_rate: 0.0,
            ..tc()
        },
    );
    assert_eq!(s.model.params.snapshot(), before);
}

#[test]
fn first_steps_follow_recorded_trajectory() {
    let mut s = setup(48);
    let r = run(
        &mut s,
        &TrainConfig {
            max_steps: Some(10),
            ..tc()
        },
    );
    let losses: Vec<f64> = r.losses.iter().map(|l| l.nll).collect();
    assert_eq!(losses.len(), 10);
    assert!(losses[9] < losses[0], "{losses:?}");
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/loss_trajectory.json"
    );
    if std::env::var_os("EMRRG_BLESS").is_some() {
        std::fs::write(path, serde_json::to_string_pretty(&losses).unwrap()).unwrap();
    }
    let golden: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    for (a, b) in losses.iter().zip(&golden) {
        assert!((a - b).abs() <= 1e-9 * b.abs(), "{a} vs {b}");
    }
}

#[test]
fn single_example_is_memorised() {
    let mut s = setup(16);
    s.model.cfg.lm_full_finetune = true;
    s.model.apply_freezing();
    s.train.truncate(1);
    let val = s.train.clone();
    let tc = TrainConfig {
        epochs: 150,
        batch_size: 1,
        learning_rate: 1e-2,
        validate_every: 1.0,
        ..TrainConfig::default()
    };
    let mut last = f64::INFINITY;
    fit(
        &mut s.model,
        &s.train,
        &[],
        &s.prompt,
        &s.vocab,
        &tc,
        &mut |e| {
            if let FitEvent::Step(r) = e {
                last = r.nll;
            }
        },
    )
    .unwrap();
    assert!(last < 0.05, "final nll {last}");
    let ids = s.model.generate(&val[0].image, &s.prompt, 61).unwrap();
    assert_eq!(s.vocab.decode(&ids).unwrap(), val[0].report);
}

#[test]
fn repeated_runs_are_identical() {
    let mut a = setup(16);
    let mut b = setup(16);
    let ra = run(&mut a, &tc());
    let rb = run(&mut b, &tc());
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(ra.validations, rb.validations);
    assert_eq!(ra.data_order_hash, rb.data_order_hash);
    assert_eq!(a.model.params.snapshot(), b.model.params.snapshot());

    let mut c = setup(16);
    let rc = run(&mut c, &TrainConfig { seed: 1, ..tc() });
    assert_ne!(ra.data_order_hash, rc.data_order_hash);
}

#[test]
fn validation_cadence_and_best_checkpoint() {
    let mut s = setup(16);
    let r = run(&mut s, &tc());
    assert_eq!(r.steps, 6);
    assert_eq!(r.validations.len(), 2);
    assert_eq!(
        r.validations.iter().map(|v| v.step).collect::<Vec<_>>(),
        [3, 6]
    );

    let mut s = setup(16);
    let r = run(
        &mut s,
        &TrainConfig {
            validate_every: 0.5,
            ..tc()
        },
    );
    assert_eq!(r.validations.len(), 4);
    let best = r.best.unwrap();
    let b = &r.validations[best];
    assert!(r
        .validations
        .iter()
        .all(|v| v.bleu4 < b.bleu4 || (v.bleu4 == b.bleu4 && v.nll >= b.nll)));
}

#[test]
fn prompt_rows_do_not_enter_the_loss() {
    let s = setup(16);
    let ex = &s.train[0];
    let report = &ex.report_ids;
    let mut sess = Session::new(&s.model.params, &s.model.adapters);
    let logits = s
        .model
        .forward_logits(&mut sess, &ex.image, &s.prompt, report)
        .unwrap();
    let (targets, mask) = targets_and_mask(s.prompt.len(), report);
    assert_eq!(mask.iter().filter(|&&m| m).count(), report.len() + 1);
    let mut scrambled = targets.clone();
    for (t, &m) in scrambled.iter_mut().zip(&mask) {
        if !m {
            *t = (*t + 7) % s.vocab.len();
        }
    }
    let a = sess.tape.nll_sum(logits, &targets, &mask).unwrap();
    let b = sess.tape.nll_sum(logits, &scrambled, &mask).unwrap();
    assert_eq!(sess.tape.value(a), sess.tape.value(b));
    let g = sess.tape.backward(a).unwrap();
    let v = s.vocab.len();
    if let Some(gl) = g.get(logits) {
        for (row, &m) in mask.iter().enumerate() {
            if !m {
                assert!(gl[row * v..(row + 1) * v].iter().all(|&x| x == 0.0));
            }
        }
    }
}
