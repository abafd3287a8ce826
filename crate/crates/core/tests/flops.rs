use deltaworld::flops::*;
use deltaworld::nn::BlockConfig;
use deltaworld::predictor::{PredictorConfig, Variant};
use deltaworld::tokenizer::{TokenizerConfig, TokenizerMode};
use deltaworld::toyvfm::ToyVfmConfig;

fn tiny() -> PipelineConfig {
    PipelineConfig {
        frame_size: 16,
        vfm: ToyVfmConfig {
            patch_size: 4,
            dim: 8,
            heads: 2,
            depth: 1,
            ..ToyVfmConfig::default()
        },
        tokenizer: TokenizerConfig {
            dim: 8,
            heads: 2,
            enc_depth: 1,
            dec_depth: 2,
            ..TokenizerConfig::default()
        },
        predictor: PredictorConfig {
            dim: 8,
            heads: 2,
            depth: 2,
            ..PredictorConfig::default()
        },
    }
}

#[test]
fn analytic_counts_match_the_instrumented_graph() {
    for cfg in [tiny(), PipelineConfig::default()] {
        for v in [Variant::Spatial, Variant::Frame, Variant::Delta] {
            for ctx in [1, 4, 6] {
                for c in verify_against_counter(v, ctx, &cfg).unwrap() {
                    assert!(c.matches(), "{v:?} ctx {ctx}: {c:?}");
                }
            }
        }
    }
}

#[test]
fn zero_depth_models_count_only_projections() {
    let mut cfg = tiny();
    cfg.tokenizer.enc_depth = 0;
    cfg.tokenizer.dec_depth = 0;
    let tc = TokenizerConfig {
        mode: TokenizerMode::Delta,
        ..cfg.tokenizer
    };
    assert_eq!(encoder_macs(&tc, 4), 0);
    assert_eq!(decoder_macs(&tc, 4), 0);
    for c in verify_against_counter(Variant::Delta, 3, &cfg).unwrap() {
        assert!(c.matches(), "{c:?}");
    }
}

#[test]
fn tiny_predictor_step_by_hand() {
    // delta, D=4, one head, hidden 16, one block, two context frames:
    // rows = 2 context + 1 query; pairs 1 + 2 + 3
    let pc = PredictorConfig {
        variant: Variant::Delta,
        dim: 4,
        heads: 1,
        depth: 1,
        ..PredictorConfig::default()
    };
    let b = BlockConfig {
        dim: 4,
        heads: 1,
        mlp_ratio: 4.0,
    };
    assert_eq!(pc.block(), b);
    let block = 4 * 3 * 16 + 2 * 3 * 4 * 16 + 2 * 6 * 4;
    let io = 2 * 16 + 16;
    assert_eq!(predictor_step_macs(&pc, 5, 2), (block + io) as u64);
}

#[test]
fn delta_decoder_cost_does_not_grow_with_context() {
    let cfg = PipelineConfig::default();
    let dec: Vec<u64> = [4, 5, 6]
        .iter()
        .map(|&c| pipeline_breakdown(Variant::Delta, 1, c, 1, &cfg).unwrap().component_macs("delta decoder"))
        .collect();
    assert!(dec[0] > 0);
    assert_eq!(dec[0], dec[1]);
    assert_eq!(dec[1], dec[2]);
}

#[test]
fn delta_predictor_cost_ignores_frame_size() {
    let mut cfg = PipelineConfig::default();
    let counts: Vec<u64> = [16, 32, 64]
        .iter()
        .map(|&fs| {
            cfg.frame_size = fs;
            pipeline_breakdown(Variant::Delta, 1, 4, 3, &cfg).unwrap().component_macs("predictor")
        })
        .collect();
    assert_eq!(counts[0], counts[1]);
    assert_eq!(counts[1], counts[2]);
}

#[test]
fn spatial_predictor_cost_grows_with_context() {
    let cfg = PipelineConfig::default();
    let r = pipeline_breakdown(Variant::Spatial, 1, 4, 3, &cfg).unwrap();
    let p: Vec<u64> = r
        .rows
        .iter()
        .filter(|r| r.component.starts_with("predictor"))
        .map(|r| r.macs_each)
        .collect();
    assert_eq!(p.len(), 3);
    assert!(p[0] < p[1] && p[1] < p[2]);
}

#[test]
fn totals_follow_the_grouping() {
    let cfg = PipelineConfig::default();
    for v in [Variant::Spatial, Variant::Frame, Variant::Delta] {
        let r = pipeline_breakdown(v, 20, 4, 3, &cfg).unwrap();
        assert_eq!(r.total_macs(), r.shared_macs() + 20 * r.per_sample_macs());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + r.rows.len() + 3);
        assert!(r.to_table().contains("FLOPs"));
    }
    let s = pipeline_breakdown(Variant::Spatial, 1, 4, 3, &cfg).unwrap();
    let d = pipeline_breakdown(Variant::Delta, 1, 4, 3, &cfg).unwrap();
    assert!(d.per_sample_macs() < s.per_sample_macs());
}
