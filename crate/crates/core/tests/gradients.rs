//! Finite-difference checks of every trainable composition, in f64 on
//! miniature configs.

use deltaworld::bom::{bom_loss_graph, bom_select_pass, BomItem, BomTarget};
use deltaworld::nn::gradcheck::gradcheck;
use deltaworld::nn::{ParamSet, Tensor};
use deltaworld::predictor::{init_predictor, predictor_graph, teacher_forced_queries, PredItem, PredictorConfig, Variant};
use deltaworld::tokenizer::{decode_graph, encode_graph, init_tokenizer, TokenizerConfig, TokenizerMode};
use rand::Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn rand_tensor(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Move every parameter away from its init so layer scales and zero biases
/// do not hide broken paths.
fn roughen(ps: &mut ParamSet<f64>, seed: u64) {
    let mut rng = deltaworld::seed::rng(&[seed]);
    for (name, p) in ps.iter_mut() {
        let ls = name.ends_with("ls1") || name.ends_with("ls2");
        for v in p.value.data_mut() {
            *v = if ls { rng.gen_range(0.3..0.8) } else { *v + rng.gen_range(-0.15..0.15) };
        }
    }
}

fn tiny_tokenizer(mode: TokenizerMode) -> TokenizerConfig {
    TokenizerConfig {
        mode,
        dim: 8,
        heads: 2,
        enc_depth: 1,
        dec_depth: 1,
        mlp_ratio: 2.0,
        rope_base: 100.0,
    }
}

fn tiny_predictor(variant: Variant) -> PredictorConfig {
    PredictorConfig {
        variant,
        dim: 8,
        heads: 2,
        depth: 1,
        mlp_ratio: 2.0,
        ..PredictorConfig::default()
    }
}

#[test]
fn tokenizer_encode_decode() {
    let side = 2;
    for mode in [TokenizerMode::Delta, TokenizerMode::Frame] {
        let cfg = tiny_tokenizer(mode);
        let mut ps = init_tokenizer::<f64>(&cfg, 3).unwrap();
        roughen(&mut ps, 4);
        let mut rng = deltaworld::seed::rng(&[5]);
        // two items per batch
        let prev = rand_tensor(2 * side * side, 8, 1.0, &mut rng);
        let cur = rand_tensor(2 * side * side, 8, 1.0, &mut rng);
        let r = gradcheck(&ps, EPS, |g, p| {
            let (pv, base) = match mode {
                TokenizerMode::Delta => (Some(&prev), prev.clone()),
                TokenizerMode::Frame => (None, Tensor::zeros(prev.rows(), 8)),
            };
            let z = encode_graph(g, p, &cfg, pv, &cur, side)?;
            let y = decode_graph(g, p, &cfg, &base, z, side)?;
            let t = g.constant(cur.clone());
            g.mse(y, t)
        })
        .unwrap();
        assert!(r.checked > 0);
        assert!(r.max_rel_err < TOL, "{mode:?}: {} in {}", r.max_rel_err, r.worst);
    }
}

#[test]
fn predictor_teacher_forced_pass() {
    let side = 2;
    for variant in [Variant::Spatial, Variant::Delta] {
        let cfg = tiny_predictor(variant);
        let m = cfg.tokens_per_frame(side);
        let mut ps = init_predictor::<f64>(&cfg, 6).unwrap();
        roughen(&mut ps, 7);
        let mut rng = deltaworld::seed::rng(&[8]);
        let times = [0.0, 0.1, 0.25];
        let ctx = rand_tensor(3 * m, 8, 1.0, &mut rng);
        let target = rand_tensor(2 * m, 8, 1.0, &mut rng);
        let r = gradcheck(&ps, EPS, |g, p| {
            let item = PredItem {
                context: &ctx,
                times: &times,
                queries: teacher_forced_queries(&times, 0),
            };
            let q = p.get("query")?;
            let y = predictor_graph(g, p, &cfg, side, &[item], q)?;
            let t = g.constant(target.clone());
            g.smooth_l1(y, t, 0.1)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{variant:?}: {} in {}", r.max_rel_err, r.worst);
    }
}

#[test]
fn bom_step_including_query_bank() {
    let side = 2;
    let k = 3;
    let cfg = tiny_predictor(Variant::Delta);
    let mut ps = init_predictor::<f64>(&cfg, 9).unwrap();
    roughen(&mut ps, 10);
    let mut rng = deltaworld::seed::rng(&[11]);
    let items: Vec<BomItem<f64>> = (0..2)
        .map(|_| BomItem {
            context: rand_tensor(2, 8, 1.0, &mut rng),
            times: vec![0.0, 0.2],
            targets: (1..=2)
                .map(|c| BomTarget {
                    ctx_len: c,
                    time: 0.2 * c as f64,
                    value: rand_tensor(1, 8, 1.0, &mut rng),
                })
                .collect(),
        })
        .collect();
    let banks: Vec<Tensor<f64>> = (0..2).map(|_| rand_tensor(k, 8, 0.5, &mut rng)).collect();
    let sel = bom_select_pass(&ps, &cfg, side, &items, &banks, 0.1).unwrap();
    ps.insert("bank", Tensor::vstack(&banks.iter().collect::<Vec<_>>()), true);
    let r = gradcheck(&ps, EPS, |g, p| {
        let q = p.get("bank")?;
        bom_loss_graph(g, p, &cfg, side, &items, q, k, &sel.selected, 0.1)
    })
    .unwrap();
    assert!(r.max_rel_err < TOL, "{} in {}", r.max_rel_err, r.worst);
}
