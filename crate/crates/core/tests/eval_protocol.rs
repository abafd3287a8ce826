use std::sync::OnceLock;

use deltaworld::eval::*;
use deltaworld::nn::{ParamSet, Tensor};
use deltaworld::predictor::{Predictor, PredictorConfig, Variant};
use deltaworld::synthworld::{generate_corpus, Dynamics, ScenarioConfig, VideoSequence};
use deltaworld::tokenizer::{Tokenizer, TokenizerConfig};
use deltaworld::toyvfm::{FeatureGrid, FeatureSequence, ToyVfm, ToyVfmConfig};

struct Fixture {
    moving: Vec<VideoSequence>,
    moving_feats: Vec<FeatureSequence>,
    still: Vec<VideoSequence>,
    still_feats: Vec<FeatureSequence>,
    head: TaskHead,
    black: FeatureGrid,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let vfm = ToyVfm::new(ToyVfmConfig::default()).unwrap();
        let still_cfg = ScenarioConfig {
            dynamics: Dynamics::DeterministicDrift,
            velocity: Some([0.0, 0.0]),
            ..ScenarioConfig::desk()
        };
        let moving = generate_corpus(&ScenarioConfig::desk(), 4, 1).unwrap();
        let still = generate_corpus(&still_cfg, 4, 2).unwrap();
        let embed = |c: &[VideoSequence]| c.iter().map(|s| vfm.embed_sequence(s).unwrap()).collect::<Vec<_>>();
        let (moving_feats, still_feats) = (embed(&moving), embed(&still));
        let nc = ScenarioConfig::desk().num_classes();
        let mut grids = Vec::new();
        let mut labels = Vec::new();
        for (s, f) in moving.iter().zip(&moving_feats) {
            for i in 0..s.len() {
                grids.push(&f.grids[i]);
                labels.push(patch_labels(s.label(i), 32, 8, nc));
            }
        }
        let refs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
        let head = train_task_head(&grids, &refs, nc, &HeadConfig { steps: 50, ..HeadConfig::default() }).unwrap();
        Fixture {
            black: vfm.black_frame(32).unwrap(),
            moving,
            moving_feats,
            still,
            still_feats,
            head,
        }
    })
}

fn spatial() -> Predictor {
    Predictor::new(
        PredictorConfig {
            variant: Variant::Spatial,
            depth: 2,
            ..PredictorConfig::default()
        },
        3,
    )
    .unwrap()
}

#[test]
fn zero_noise_makes_best_equal_mean() {
    let f = fixture();
    let cfg = EvalConfig {
        sigma: 0.0,
        ..EvalConfig::default()
    };
    let p = spatial();
    let tok = Tokenizer::new(TokenizerConfig::default(), 4, f.black.clone()).unwrap();
    let delta = Predictor::new(
        PredictorConfig {
            variant: Variant::Delta,
            ..PredictorConfig::default()
        },
        5,
    )
    .unwrap();
    let models = [WorldModel::new(&p, None).unwrap(), WorldModel::new(&delta, Some(&tok)).unwrap()];
    for model in &models {
        for h in [Horizon::Short, Horizon::Mid] {
            let case = build_case(0, &f.moving[0], &f.moving_feats[0], &cfg, h, 8).unwrap();
            let set = run_case(model, &case, &cfg, &QuerySource::noise(64, 0.0)).unwrap();
            assert_eq!(set.k(), 20);
            let row = score_case(&set, &case, &f.head).unwrap();
            assert_eq!(row.best.feature_loss, row.mean.feature_loss);
            assert_eq!(row.best.miou, row.mean.miou);
            assert_eq!(row.best.index, Some(0));
            let single = rollout(model, &case.context, &case.target_times, 1, &QuerySource::noise(64, 0.0), 0).unwrap();
            assert_eq!(single.final_grids()[0], set.final_grids()[0]);
        }
    }
}

#[test]
fn copy_last_is_present_on_a_still_world() {
    let f = fixture();
    let cfg = EvalConfig::default();
    for (i, (s, feats)) in f.still.iter().zip(&f.still_feats).enumerate() {
        for h in [Horizon::Short, Horizon::Mid] {
            let case = build_case(i, s, feats, &cfg, h, 8).unwrap();
            let last = case.context.grids.last().unwrap();
            let c = copy_last(last, &case.truth, &f.head, &case.labels).unwrap();
            assert_eq!(c.miou, present(&case.truth, &f.head, &case.labels).unwrap());
            assert_eq!(c.feature_loss, 0.0);
        }
    }
}

fn tiny_head() -> TaskHead {
    // class 0 when the first feature is positive, else class 1
    let mut ps = ParamSet::new();
    ps.insert("linear.w", Tensor::from_vec(2, 2, vec![1.0, -1.0, 0.0, 0.0]), false);
    ps.insert("linear.b", Tensor::zeros(1, 2), false);
    ps.insert("norm.mean", Tensor::zeros(1, 2), false);
    ps.insert("norm.inv_std", Tensor::ones(1, 2), false);
    TaskHead::from_params(2, ps).unwrap()
}

fn grid(v: [f32; 4]) -> FeatureGrid {
    FeatureGrid {
        h: 1,
        w: 2,
        tokens: Tensor::from_vec(2, 2, v.to_vec()),
    }
}

fn traj(id: usize, g: FeatureGrid) -> Trajectory {
    Trajectory {
        id,
        queries: vec![Tensor::zeros(1, 2)],
        tokens: vec![g.tokens.clone()],
        grids: vec![g],
    }
}

#[test]
fn best_follows_feature_loss_not_the_task_metric() {
    let head = tiny_head();
    let truth = grid([0.1, 0.0, 0.1, 0.0]);
    let labels = head.predict(&truth).unwrap();
    assert_eq!(labels, vec![0, 0]);
    // right classes, far in feature space
    let far = grid([0.5, 0.5, 0.5, 0.5]);
    // wrong classes, close in feature space
    let near = grid([-0.01, 0.0, -0.01, 0.0]);
    let set = RolloutSet {
        context: FeatureSequence {
            grids: vec![truth.clone()],
            timestamps: vec![0.0],
        },
        target_times: vec![0.1],
        trajectories: vec![traj(0, far.clone()), traj(1, near.clone())],
    };
    assert!(head_miou(&head, &far, &labels).unwrap() > head_miou(&head, &near, &labels).unwrap());
    let best = score_best(&set, &truth, &head, &labels).unwrap();
    assert_eq!(best.index, Some(1));
    assert_eq!(best.miou, 0.0);
    assert!((best.feature_loss - 0.00605).abs() < 1e-8);
}

#[test]
fn trajectories_are_isolated_and_nested() {
    let f = fixture();
    let p = spatial();
    let model = WorldModel::new(&p, None).unwrap();
    let cfg = EvalConfig::default();
    let case = build_case(1, &f.moving[1], &f.moving_feats[1], &cfg, Horizon::Mid, 8).unwrap();
    let qs = QuerySource::noise(64, 0.5);
    let big = rollout(&model, &case.context, &case.target_times, 8, &qs, 42).unwrap();
    let small = rollout(&model, &case.context, &case.target_times, 4, &qs, 42).unwrap();
    assert_eq!(big.prefix(4), small);
    let lone = rollout_ids(&model, &case.context, &case.target_times, &[6], &qs, 42).unwrap();
    assert_eq!(lone.trajectories[0], big.trajectories[6]);
    // every step draws a fresh query
    let t = &big.trajectories[2];
    assert_ne!(t.queries[0], t.queries[1]);

    let mut prev = f64::INFINITY;
    for k in 1..=8 {
        let sub = big.prefix(k);
        let b = score_best(&sub, &case.truth, &f.head, &case.labels).unwrap();
        assert!(b.feature_loss <= prev);
        prev = b.feature_loss;
        if k == 1 {
            let m = score_mean(&sub, &case.truth, &f.head, &case.labels).unwrap();
            assert_eq!(m.feature_loss, b.feature_loss);
            assert_eq!(m.miou, b.miou);
        }
    }
}

#[test]
fn context_and_targets_follow_the_protocol() {
    let f = fixture();
    let cfg = EvalConfig::default();
    let s = &f.moving[0];
    let short = build_case(0, s, &f.moving_feats[0], &cfg, Horizon::Short, 8).unwrap();
    let mid = build_case(0, s, &f.moving_feats[0], &cfg, Horizon::Mid, 8).unwrap();
    assert_eq!(short.context_frames, vec![2, 4, 6, 8]);
    assert_eq!(short.target_frames, vec![10]);
    assert_eq!(mid.target_frames, vec![10, 12, 14]);
    assert_eq!(mid.truth, f.moving_feats[0].grids[14]);
    assert_ne!(case_seed(&cfg, &short), case_seed(&cfg, &mid));
    let late = EvalConfig {
        anchor: Some(22),
        ..cfg
    };
    assert!(build_case(0, s, &f.moving_feats[0], &late, Horizon::Mid, 8).is_err());
}
