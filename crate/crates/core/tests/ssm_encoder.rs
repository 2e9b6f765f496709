use emrrg_core::gradcheck::grad_check;
use emrrg_core::param::uniform;
use emrrg_core::peft::AdapterSet;
use emrrg_core::ssm::{EncoderConfig, MambaBlock, VisionEncoder};
use emrrg_core::{ParamStore, Session, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-timestep loop with explicit zero-order-hold discretisation.
fn naive_scan(
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Vec<f64> {
    let (l, ch) = (x.shape()[0], x.shape()[1]);
    let s = a.shape()[1];
    let mut h = vec![vec![0.0f64; s]; ch];
    let mut y = vec![0.0; l * ch];
    for t in 0..l {
        for k in 0..ch {
            let dt = delta.at2(t, k);
            let mut acc = d.data()[k] * x.at2(t, k);
            for j in 0..s {
                let a_bar = (dt * a.at2(k, j)).exp();
                let b_bar = dt * b.at2(t, j);
                h[k][j] = a_bar * h[k][j] + b_bar * x.at2(t, k);
                acc += c.at2(t, j) * h[k][j];
            }
            y[t * ch + k] = acc;
        }
    }
    y
}

fn random_case(rng: &mut ChaCha8Rng) -> [Tensor; 6] {
    let l = rng.gen_range(1..=16);
    let ch = rng.gen_range(1..=6);
    let s = rng.gen_range(1..=5);
    let x = uniform(rng, &[l, ch], 2.0);
    let delta = Tensor::new(
        &[l, ch],
        (0..l * ch).map(|_| rng.gen_range(0.001..1.5)).collect(),
    )
    .unwrap();
    let a = Tensor::new(
        &[ch, s],
        (0..ch * s).map(|_| -rng.gen_range(0.05..4.0)).collect(),
    )
    .unwrap();
    let b = uniform(rng, &[l, s], 1.5);
    let c = uniform(rng, &[l, s], 1.5);
    let d = uniform(rng, &[ch], 1.0);
    [x, delta, a, b, c, d]
}

fn scan(case: &[Tensor; 6]) -> Tensor {
    let mut tape = Tape::new();
    let v: Vec<_> = case.iter().map(|t| tape.constant(t.clone())).collect();
    let y = tape
        .selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])
        .unwrap();
    tape.value(y).clone()
}

#[test]
fn scan_matches_sequential_oracle_on_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let case = random_case(&mut rng);
        let want = naive_scan(&case[0], &case[1], &case[2], &case[3], &case[4], &case[5]);
        let got = scan(&case);
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    assert!(worst < 1e-10, "max abs error {worst}");
}

#[test]
fn scan_single_step_and_fast_decay() {
    let x = Tensor::new(&[1, 1], vec![0.7]).unwrap();
    let dt = Tensor::new(&[1, 1], vec![0.3]).unwrap();
    let a = Tensor::new(&[1, 2], vec![-1.0, -2.0]).unwrap();
    let b = Tensor::new(&[1, 2], vec![0.5, -0.25]).unwrap();
    let c = Tensor::new(&[1, 2], vec![2.0, 4.0]).unwrap();
    let d = Tensor::new(&[1], vec![1.5]).unwrap();
    let y = scan(&[x, dt, a, b.clone(), c.clone(), d]);
    let want = 0.3 * (0.5 * 2.0 + -0.25 * 4.0) * 0.7 + 1.5 * 0.7;
    assert!((y.data()[0] - want).abs() < 1e-15);

    let x = Tensor::new(&[3, 1], vec![1.0, -2.0, 0.5]).unwrap();
    let dt = Tensor::full(&[3, 1], 1.0);
    let a = Tensor::full(&[1, 2], -1e4);
    let b = Tensor::full(&[3, 2], 0.0);
    let c = Tensor::full(&[3, 2], 1.0);
    let d = Tensor::new(&[1], vec![0.5]).unwrap();
    let y = scan(&[x.clone(), dt, a, b, c, d]);
    for t in 0..3 {
        assert_eq!(y.data()[t], 0.5 * x.data()[t]);
    }
}

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        image_size: 32,
        patch_size: 8,
        d_model: 16,
        n_blocks: 2,
        dt_rank: Some(2),
        ..EncoderConfig::default()
    }
}

fn block(seed: u64) -> (ParamStore, MambaBlock, EncoderConfig) {
    let cfg = small_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = MambaBlock::new(&mut store, &mut rng, &cfg, "b").unwrap();
    (store, b, cfg)
}

fn run_block(store: &ParamStore, b: &MambaBlock, cfg: &EncoderConfig, u: &Tensor) -> Tensor {
    let set = AdapterSet::default();
    let mut s = Session::new(store, &set);
    let uv = s.tape.constant(u.clone());
    let y = b.forward(&mut s, cfg, uv).unwrap();
    s.tape.value(y).clone()
}

fn reverse_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2().unwrap();
    let data = (0..r)
        .rev()
        .flat_map(|i| t.row(i).to_vec())
        .collect::<Vec<_>>();
    Tensor::new(&[r, c], data).unwrap()
}

#[test]
fn bidirectional_equivariance_is_exact() {
    let (mut store, b, cfg) = block(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let u = uniform(&mut rng, &[9, cfg.d_model], 1.0);
    let y = run_block(&store, &b, &cfg, &u);
    for (f, w) in b.fwd.param_ids().into_iter().zip(b.bwd.param_ids()) {
        let tf = store.value(f).clone();
        let tw = store.value(w).clone();
        *store.value_mut(f) = tw;
        *store.value_mut(w) = tf;
    }
    let y_rev = run_block(&store, &b, &cfg, &reverse_rows(&u));
    assert_eq!(y_rev, reverse_rows(&y));
}

#[test]
fn each_direction_is_causal() {
    let (store, b, cfg) = block(7);
    let set = AdapterSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = uniform(&mut rng, &[10, cfg.d_model], 1.0);
    let run = |u: &Tensor| {
        let mut s = Session::new(&store, &set);
        let uv = s.tape.constant(u.clone());
        let y = b.fwd.forward(&mut s, &cfg, uv).unwrap();
        s.tape.value(y).clone()
    };
    let base = run(&u);
    for t in 0..10 {
        let mut p = u.clone();
        for j in 0..cfg.d_model {
            p.data_mut()[t * cfg.d_model + j] += 0.5;
        }
        let moved = run(&p);
        for i in 0..10 {
            let same = moved.row(i) == base.row(i);
            assert_eq!(same, i < t, "perturb {t}, row {i}");
        }
    }
}

#[test]
fn zero_out_proj_gives_residual_identity_and_length_one_is_symmetric() {
    let (mut store, b, cfg) = block(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let u1 = uniform(&mut rng, &[1, cfg.d_model], 1.0);
    let (mut fwd_only, mut bwd_only) = (store.clone(), store.clone());
    *fwd_only.value_mut(b.bwd.out_proj) = Tensor::zeros(store.value(b.bwd.out_proj).shape());
    *bwd_only.value_mut(b.fwd.out_proj) = Tensor::zeros(store.value(b.fwd.out_proj).shape());
    for (dst, src) in b.bwd.param_ids().into_iter().zip(b.fwd.param_ids()) {
        let v = store.value(src).clone();
        *bwd_only.value_mut(dst) = v;
    }
    let yf = run_block(&fwd_only, &b, &cfg, &u1);
    let yb = run_block(&bwd_only, &b, &cfg, &u1);
    assert_eq!(yf, yb);

    for id in [b.fwd.out_proj, b.bwd.out_proj] {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
    let u = uniform(&mut rng, &[6, cfg.d_model], 1.0);
    assert_eq!(run_block(&store, &b, &cfg, &u), u);
}

#[test]
fn mamba_block_gradients_over_five_seeds() {
    for seed in 0..5 {
        let (mut store, b, cfg) = block(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let u = uniform(&mut rng, &[5, cfg.d_model], 1.0);
        let err = grad_check(
            &mut store,
            |s| {
                let uv = s.tape.constant(u.clone());
                let y = b.forward(s, &cfg, uv)?;
                let sq = s.tape.mul(y, y)?;
                s.tape.mean(sq)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn encoder_gradients_and_sensitivity() {
    let cfg = EncoderConfig {
        image_size: 16,
        patch_size: 8,
        d_model: 16,
        n_blocks: 2,
        d_state: 4,
        dt_rank: Some(2),
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let enc = VisionEncoder::new(&mut store, &mut rng, &cfg).unwrap();
    let img = uniform(&mut rng, &[1, 16, 16], 1.0);
    let err = grad_check(
        &mut store,
        |s| {
            let x = s.tape.constant(img.clone());
            let y = enc.forward(s, x)?;
            let w = s
                .tape
                .constant(uniform(&mut ChaCha8Rng::seed_from_u64(4), &[4, 16], 1.0));
            let p = s.tape.mul(y, w)?;
            s.tape.sum(p)
        },
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let set = AdapterSet::default();
    let a = enc.encode(&store, &set, &img).unwrap();
    let again = enc.encode(&store, &set, &img).unwrap();
    assert_eq!(a.tokens, again.tokens);
    let mut bright = img.clone();
    bright.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    let b = enc.encode(&store, &set, &bright).unwrap();
    assert!(a.tokens.max_abs_diff(&b.tokens) > 0.0);
}

#[test]
fn token_counts() {
    let cfg = EncoderConfig {
        image_size: 192,
        ..EncoderConfig::default()
    };
    assert_eq!(cfg.n_tokens(), 144);
    assert_eq!(EncoderConfig::default().n_tokens(), 16);
}
