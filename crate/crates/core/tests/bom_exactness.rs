use deltaworld::bom::{bom_select, bom_training_step, discriminative_step, sample_queries, BomItem, BomTarget};
use deltaworld::nn::Tensor;
use deltaworld::predictor::{init_predictor, PredictorConfig, Variant};
use rand::Rng;

fn cfg(variant: Variant) -> PredictorConfig {
    PredictorConfig {
        variant,
        dim: 16,
        heads: 2,
        depth: 2,
        ..PredictorConfig::default()
    }
}

fn batch(n_items: usize, frames: usize, m: usize, seed: u64) -> Vec<BomItem<f64>> {
    let mut rng = deltaworld::seed::rng(&[seed]);
    let mut t = |r: usize| Tensor::from_fn(r, 16, |_, _| rng.gen_range(-1.0..1.0));
    (0..n_items)
        .map(|_| {
            let times: Vec<f64> = (0..frames).map(|i| i as f64 * 0.1).collect();
            BomItem {
                context: t(frames * m),
                targets: (1..=frames)
                    .map(|c| BomTarget {
                        ctx_len: c,
                        time: c as f64 * 0.1,
                        value: t(m),
                    })
                    .collect(),
                times,
            }
        })
        .collect()
}

fn banks(n: usize, k: usize, seed: u64) -> Vec<Tensor<f64>> {
    (0..n)
        .map(|i| {
            sample_queries(k, &Tensor::zeros(1, 16), 0.5, deltaworld::seed::derive(&[seed, i as u64]))
                .unwrap()
                .queries
                .cast()
        })
        .collect()
}

#[test]
fn best_of_many_never_exceeds_the_candidate_mean() {
    for (variant, side) in [(Variant::Delta, 3), (Variant::Spatial, 2)] {
        let c = cfg(variant);
        let m = c.tokens_per_frame(side);
        let ps = init_predictor::<f64>(&c, 1).unwrap();
        for s in 0..6 {
            let items = batch(3, 3, m, s);
            let out = bom_training_step(&ps, &c, side, &items, &banks(3, 8, s), 0.1).unwrap();
            let sel = &out.selection;
            for (mn, mean) in sel.min_loss.iter().zip(&sel.mean_loss) {
                assert!(mn <= mean);
            }
            assert!(sel.l_bom() <= sel.mean_candidate_loss());
            // the differentiated loss is the selected candidates' loss
            assert!((out.loss - sel.l_bom()).abs() <= 1e-12 * sel.l_bom().max(1.0));
        }
    }
}

#[test]
fn single_candidate_matches_discriminative_gradients() {
    let side = 3;
    let c = cfg(Variant::Delta);
    let ps = init_predictor::<f64>(&c, 2).unwrap();
    let query = ps.get("query").unwrap().clone();
    for n_items in [1, 3] {
        let items = batch(n_items, 3, 1, 10 + n_items as u64);
        let banks = vec![query.clone(); n_items];
        let bom = bom_training_step(&ps, &c, side, &items, &banks, 0.1).unwrap();
        let disc = discriminative_step(&ps, &c, side, &items, 0.1).unwrap();
        assert_eq!(bom.loss, disc.loss);
        for (name, g) in &disc.grads {
            if name == "query" {
                continue;
            }
            assert_eq!(g, &bom.grads[name], "{name}");
        }
        if n_items == 1 {
            assert_eq!(&bom.query_grads, &disc.grads["query"]);
        }
    }
}

#[test]
fn unselected_candidates_get_no_gradient() {
    let side = 3;
    let c = cfg(Variant::Delta);
    let ps = init_predictor::<f64>(&c, 3).unwrap();
    let k = 6;
    let items = batch(2, 2, 1, 20);
    let out = bom_training_step(&ps, &c, side, &items, &banks(2, k, 21), 0.1).unwrap();
    let mut used = vec![false; 2 * k];
    let mut t = 0;
    for (a, it) in items.iter().enumerate() {
        for _ in &it.targets {
            used[a * k + out.selection.selected[t]] = true;
            t += 1;
        }
    }
    assert!(used.iter().any(|u| !u), "want some unselected candidates");
    for (row, u) in used.iter().enumerate() {
        let g = out.query_grads.row(row);
        if *u {
            assert!(g.iter().any(|v| *v != 0.0));
        } else {
            assert!(g.iter().all(|v| *v == 0.0), "row {row}");
        }
    }
}

#[test]
fn selection_agrees_with_brute_force_over_candidates() {
    let losses = [0.3, 0.1, 0.5, 0.1];
    assert_eq!(bom_select(&losses, &0.0, |a: &f64, _| *a).unwrap(), (1, 0.1));
}
