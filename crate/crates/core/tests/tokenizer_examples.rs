use std::sync::OnceLock;

use deltaworld::nn::{mse, Tensor};
use deltaworld::synthworld::{generate_corpus, Dynamics, ScenarioConfig};
use deltaworld::tokenizer::*;
use deltaworld::toyvfm::{FeatureGrid, FeatureSequence, ToyVfm, ToyVfmConfig};
use rand::Rng;

struct World {
    moving: Vec<FeatureSequence>,
    still: Vec<FeatureSequence>,
    black: FeatureGrid,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let vfm = ToyVfm::new(ToyVfmConfig::default()).unwrap();
        let embed = |cfg: &ScenarioConfig, seed| {
            generate_corpus(cfg, 16, seed)
                .unwrap()
                .iter()
                .map(|s| vfm.embed_sequence(s).unwrap())
                .collect()
        };
        let still_cfg = ScenarioConfig {
            dynamics: Dynamics::DeterministicDrift,
            velocity: Some([0.0, 0.0]),
            ..ScenarioConfig::desk()
        };
        let moving = embed(&ScenarioConfig::desk(), 1);
        let still = embed(&still_cfg, 2);
        let black = vfm.black_frame(32).unwrap();
        World {
            moving,
            still,
            black,
        }
    })
}

fn small(mode: TokenizerMode) -> TokenizerConfig {
    TokenizerConfig {
        mode,
        enc_depth: 2,
        dec_depth: 2,
        ..TokenizerConfig::default()
    }
}

fn budget(steps: u64) -> TokenizerTrainConfig {
    TokenizerTrainConfig {
        steps,
        ..TokenizerTrainConfig::default()
    }
}

fn random_grid(seed: u64) -> FeatureGrid {
    let mut rng = deltaworld::seed::rng(&[seed]);
    FeatureGrid {
        h: 4,
        w: 4,
        tokens: Tensor::from_fn(16, 64, |_, _| rng.gen_range(-1.0..1.0)),
    }
}

fn rel_norm(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let n: f64 = b.data().iter().map(|y| (*y as f64).powi(2)).sum();
    (d / n).sqrt()
}

fn variance(corpus: &[FeatureSequence]) -> f64 {
    let vals: Vec<f64> = corpus
        .iter()
        .flat_map(|s| s.grids.iter().flat_map(|g| g.tokens.data().iter().map(|v| *v as f64)))
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
}

#[test]
fn one_token_per_frame() {
    let w = world();
    let tok = Tokenizer::new(TokenizerConfig::default(), 0, w.black.clone()).unwrap();
    let x = &w.moving[0].grids[3];
    let z = tok.encode_delta(&w.moving[0].grids[2], x).unwrap();
    assert_eq!(z.value.shape(), [1, 64]);
    assert_eq!(x.num_tokens() / z.value.rows(), 16);
    // 8x8 grid at desk scale, 512 px frames with 16 px patches at full scale
    assert_eq!((64 / 8) * (64 / 8), 64);
    assert_eq!((512 / 16) * (512 / 16), 1024);
}

#[test]
fn init_behaves_as_identity() {
    let w = world();
    let tok = Tokenizer::new(TokenizerConfig::default(), 3, w.black.clone()).unwrap();
    let z_init = tok.params.get("z_init").unwrap();
    let frame = Tokenizer::new(small(TokenizerMode::Frame), 3, w.black.clone()).unwrap();
    for s in 0..4 {
        let (x, y) = (random_grid(10 + s), random_grid(20 + s));
        let z = tok.encode_delta(&x, &y).unwrap();
        assert!(rel_norm(&z.value, z_init) < 1e-3);
        let rand_z = DeltaToken {
            value: random_grid(30 + s).tokens.slice_rows(0, 1),
            kind: TokenKind::Delta,
        };
        let out = tok.decode_delta(&x, &rand_z).unwrap();
        assert_eq!((out.h, out.w, out.dim()), (x.h, x.w, x.dim()));
        assert!(rel_norm(&out.tokens, &x.tokens) < 1e-3);
        let f = frame.decode_frame(&frame.encode_frame(&y).unwrap()).unwrap();
        assert!(f.tokens.data().iter().all(|v| v.abs() < 1e-3));
    }
}

#[test]
fn encoding_is_deterministic_and_ordered() {
    let w = world();
    let tok = Tokenizer::new(TokenizerConfig::default(), 4, w.black.clone()).unwrap();
    let (a, b) = (&w.moving[1].grids[4], &w.moving[1].grids[6]);
    assert_eq!(tok.encode_delta(a, b).unwrap(), tok.encode_delta(a, b).unwrap());
    assert_ne!(tok.encode_delta(a, b).unwrap().value, tok.encode_delta(b, a).unwrap().value);
    let frame = Tokenizer::new(small(TokenizerMode::Frame), 4, w.black.clone()).unwrap();
    assert_eq!(frame.encode_frame(a).unwrap(), frame.encode_frame(&a.clone()).unwrap());
    let z = tok.encode_delta(a, b).unwrap();
    assert_eq!(tok.decode_delta(a, &z).unwrap(), tok.decode_delta(a, &z).unwrap());
}

#[test]
fn black_previous_gives_an_absolute_token() {
    let w = world();
    let tok = Tokenizer::new(TokenizerConfig::default(), 5, w.black.clone()).unwrap();
    let x = &w.moving[0].grids[0];
    assert_eq!(tok.encode_delta(&w.black, x).unwrap().kind, TokenKind::AbsoluteFirst);
    assert_eq!(tok.encode_delta(x, x).unwrap().kind, TokenKind::Delta);
}

#[test]
fn sequence_encoding_contract() {
    let w = world();
    let tok = Tokenizer::new(TokenizerConfig::default(), 6, w.black.clone()).unwrap();
    let seq = &w.moving[2];
    let one = FeatureSequence {
        grids: seq.grids[..1].to_vec(),
        timestamps: seq.timestamps[..1].to_vec(),
    };
    let t1 = tok.encode_sequence(&one).unwrap();
    assert_eq!(t1.len(), 1);
    assert_eq!(t1[0].kind, TokenKind::AbsoluteFirst);
    assert_eq!(tok.encode_sequence(seq).unwrap().len(), seq.len());
    let still = tok.encode_sequence(&w.still[0]).unwrap();
    for t in &still[2..] {
        assert_eq!(t.value, still[1].value);
    }
}

#[test]
fn loss_examples() {
    let g = |v: f32| FeatureGrid {
        h: 2,
        w: 2,
        tokens: Tensor::full(4, 3, v),
    };
    assert_eq!(tokenizer_loss(&g(0.5), &g(0.5)).unwrap(), 0.0);
    assert_eq!(tokenizer_loss(&g(1.0), &g(0.0)).unwrap(), 1.0);
    let (a, b) = (random_grid(1), random_grid(2));
    let want: f64 = a
        .tokens
        .data()
        .iter()
        .zip(b.tokens.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.tokens.len() as f64;
    assert!((tokenizer_loss(&a, &b).unwrap() as f64 - want).abs() < 1e-6 * want);
}

#[test]
fn first_step_loss_is_the_copy_error() {
    let w = world();
    let mut train = budget(1);
    train.black_pair_prob = 0.0;
    let tok = Tokenizer::new(TokenizerConfig::default(), 7, w.black.clone()).unwrap();
    let trainer = TokenizerTrainer::new(tok, train, 7);
    let pairs = sample_pairs(&w.moving, &train, 7, 0).unwrap();
    let copy: f64 = pairs
        .iter()
        .map(|p| {
            let s = &w.moving[p.seq];
            mse(&s.grids[p.prev.unwrap()].tokens, &s.grids[p.cur].tokens).unwrap() as f64
        })
        .sum::<f64>()
        / pairs.len() as f64;
    let l = trainer.peek_loss(&w.moving).unwrap() as f64;
    assert!((l - copy).abs() < 0.01 * copy, "{l} vs {copy}");
}

#[test]
fn still_video_has_nothing_to_learn() {
    let w = world();
    // every pair is a zero change; black pairs would add absolute content
    let mut train = budget(200);
    train.black_pair_prob = 0.0;
    let (_, losses) = train_tokenizer(&w.still, small(TokenizerMode::Delta), train, w.black.clone(), 8).unwrap();
    assert_eq!(losses.len(), 200);
    let last = *losses.last().unwrap();
    assert!(last < 1e-4, "final loss {last}");
}

#[test]
fn training_is_reproducible() {
    let w = world();
    let run = || train_tokenizer(&w.moving, small(TokenizerMode::Delta), budget(15), w.black.clone(), 11).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a.params, b.params);
}

#[test]
fn trained_tokenizers_reconstruct() {
    let w = world();
    let var = variance(&w.moving);
    let cfg = |mode| TokenizerConfig {
        mode,
        ..TokenizerConfig::default()
    };
    let train = TokenizerTrainConfig::default();
    let (delta, _) = train_tokenizer(&w.moving, cfg(TokenizerMode::Delta), train, w.black.clone(), 12).unwrap();
    let (frame, _) = train_tokenizer(&w.moving, cfg(TokenizerMode::Frame), train, w.black.clone(), 12).unwrap();
    let f_all = reconstruction_mse(&frame, &w.moving).unwrap();
    let d_all = reconstruction_mse(&delta, &w.moving).unwrap();
    // frame 0 is an absolute code in both modes; compare on the changes
    let d = reconstruction_mse_from(&delta, &w.moving, 1).unwrap();
    let f = reconstruction_mse_from(&frame, &w.moving, 1).unwrap();
    println!("variance {var:.4} delta {d:.5} ({d_all:.5} all) frame {f:.5} ({f_all:.5} all)");
    assert!(f_all < 0.1 * var, "frame {f_all} vs variance {var}");
    assert!(d_all < 0.1 * var, "delta {d_all} vs variance {var}");
    assert!(d < f, "delta {d} frame {f}");

    // re-encoding an unchanged frame decodes back to it
    for s in [0, 3, 9] {
        let x = &w.moving[s].grids[5];
        let back = delta.decode_delta(x, &delta.encode_delta(x, x).unwrap()).unwrap();
        let e = tokenizer_loss(&back, x).unwrap() as f64;
        assert!(e < 2.0 * d, "no-change error {e} vs {d}");
    }
}
