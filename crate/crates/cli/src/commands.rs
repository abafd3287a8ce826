//! The pipeline subcommands. Every CSV starts with a `# config_hash=...
//! seed=...` line and every JSON summary carries the same two fields.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use deltaworld::bom::{PredictorTrainConfig, PredictorTrainer, StepLog};
use deltaworld::checkpoint::{self as ckpt, Checkpoint};
use deltaworld::eval::{
    evaluate, mode_recovery, patch_labels, summarize, sweep_k, train_task_head, Horizon, MetricsRow, QuerySource,
    SweepCell, TaskHead, WorldModel,
};
use deltaworld::flops::{pipeline_breakdown, verify_against_counter, PipelineConfig};
use deltaworld::nn::AdamW;
use deltaworld::predictor::{Predictor, PredictorConfig, TokenCache, Variant};
use deltaworld::synthworld::{generate_corpus, read_dataset, write_dataset, VideoSequence};
use deltaworld::tokenizer::{reconstruction_mse, Tokenizer, TokenizerConfig, TokenizerMode, TokenizerTrainer};
use deltaworld::toyvfm::{FeatureSequence, ToyVfm};
use deltaworld::Error;
use serde_json::json;

use crate::config::RunConfig;
use crate::{note, Mode, UsageError};

/// Paths under the output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn data_train(&self) -> PathBuf {
        self.root.join("data/train")
    }

    pub fn data_test(&self) -> PathBuf {
        self.root.join("data/test")
    }

    pub fn vfm(&self) -> PathBuf {
        self.root.join("data/toyvfm")
    }

    pub fn head(&self) -> PathBuf {
        self.root.join("data/head")
    }

    pub fn tokenizer(&self, mode: TokenizerMode) -> PathBuf {
        self.root.join(format!("tokenizer-{}", mode.as_str()))
    }

    pub fn predictor(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("predictor-{}", mode.name()))
    }

    pub fn eval(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("eval-{}", mode.name()))
    }

    pub fn flops(&self) -> PathBuf {
        self.root.join("flops")
    }

    pub fn sweep(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("sweep-{}", mode.name()))
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

pub(crate) fn stamp(cfg: &RunConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    note(format!("wrote {}", path.display()));
    Ok(())
}

fn write_json(path: &Path, cfg: &RunConfig, mut body: serde_json::Value) -> Result<()> {
    body["config_hash"] = json!(cfg.hash());
    body["seed"] = json!(cfg.seed);
    let mut text = serde_json::to_string_pretty(&body)?;
    text.push('\n');
    write(path, text)
}

fn csv(cfg: &RunConfig, header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = stamp(cfg);
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

/// Training log that starts fresh or, when resuming, appends.
struct Log {
    file: fs::File,
    path: PathBuf,
}

impl Log {
    fn open(path: PathBuf, cfg: &RunConfig, header: &str, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut opts = OpenOptions::new();
        if append && path.exists() {
            opts.append(true);
        } else {
            opts.write(true).create(true).truncate(true);
        }
        let mut file = opts.open(&path).map_err(|e| Error::io(&path, e))?;
        if !append {
            file.write_all(csv(cfg, header, []).as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file, path })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        Ok(())
    }
}

pub(crate) fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(dir)?)
}

fn load_vfm(layout: &Layout) -> Result<ToyVfm> {
    Ok(ckpt::load_vfm(&load_checkpoint(&layout.vfm())?)?)
}

fn load_head(layout: &Layout) -> Result<TaskHead> {
    Ok(ckpt::load_head(&load_checkpoint(&layout.head())?)?)
}

fn load_corpus(dir: &Path) -> Result<Vec<VideoSequence>> {
    let c = read_dataset(dir)?;
    if c.is_empty() {
        bail!(Error::Config(format!("{} holds no sequences", dir.display())));
    }
    Ok(c)
}

fn embed(vfm: &ToyVfm, corpus: &[VideoSequence]) -> Result<Vec<FeatureSequence>> {
    Ok(corpus.iter().map(|s| vfm.embed_sequence(s)).collect::<Result<_, _>>()?)
}

fn load_tokenizer(layout: &Layout, mode: TokenizerMode) -> Result<Tokenizer> {
    let ck = load_checkpoint(&layout.tokenizer(mode))?;
    Ok(ckpt::load_tokenizer(&ck)?)
}

fn tokenizer_for(layout: &Layout, variant: Variant) -> Result<Option<Tokenizer>> {
    variant.tokenizer_mode().map(|m| load_tokenizer(layout, m)).transpose()
}

/// Predictor checkpoint tagged with its training mode, plus optimizer state.
fn predictor_checkpoint(mode: Mode, t: &PredictorTrainer) -> Checkpoint {
    let mut ck = ckpt::predictor_checkpoint(&t.predictor, t.seed, t.step_count()).with_group("optim", t.optimizer.state());
    ck.variant = Some(mode.name().into());
    ck
}

fn load_mode_predictor(dir: &Path, mode: Mode) -> Result<(Checkpoint, Predictor)> {
    let ck = load_checkpoint(dir)?;
    if ck.variant.as_deref() != Some(mode.name()) {
        bail!(Error::Checkpoint(format!(
            "{} holds a {} predictor, not {}",
            dir.display(),
            ck.variant.as_deref().unwrap_or("untagged"),
            mode.name()
        )));
    }
    let p = ckpt::load_predictor(&ck)?;
    Ok((ck, p))
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    cfg.scenario.validate()?;
    let d = &cfg.data;
    let train = generate_corpus(&cfg.scenario, d.train_sequences, d.train_seed)?;
    let test = generate_corpus(&cfg.scenario, d.test_sequences, d.test_seed)?;
    write_dataset(&train, &layout.data_train())?;
    write_dataset(&test, &layout.data_test())?;

    let vfm = ToyVfm::new(cfg.vfm)?;
    ckpt::vfm_checkpoint(&vfm).save(&layout.vfm())?;

    let patch = vfm.config().patch_size;
    let size = cfg.scenario.frame_size;
    let nc = cfg.scenario.num_classes();
    let labelled = |corpus: &[VideoSequence], feats: &[FeatureSequence]| {
        let mut grids = Vec::new();
        let mut labels = Vec::new();
        for (s, f) in corpus.iter().zip(feats) {
            for i in 0..s.len() {
                grids.push(f.grids[i].clone());
                labels.push(patch_labels(s.label(i), size, patch, nc));
            }
        }
        (grids, labels)
    };
    let (grids, labels) = labelled(&train, &embed(&vfm, &train)?);
    let grid_refs: Vec<_> = grids.iter().collect();
    let label_refs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
    let head = train_task_head(&grid_refs, &label_refs, nc, &cfg.head)?;
    ckpt::head_checkpoint(&head, &cfg.head, cfg.head.seed, cfg.head.steps as u64).save(&layout.head())?;

    let (tg, tl) = labelled(&test, &embed(&vfm, &test)?);
    let miou = head.evaluate(&tg.iter().collect::<Vec<_>>(), &tl.iter().map(|l| l.as_slice()).collect::<Vec<_>>())?;
    note(format!("probe test mIoU {miou:.4}"));
    write_json(
        &layout.root.join("data/summary.json"),
        cfg,
        json!({
            "train_sequences": train.len(),
            "test_sequences": test.len(),
            "frames_per_sequence": cfg.scenario.num_frames(),
            "probe_test_miou": miou,
        }),
    )
}

pub fn train_tokenizer(cfg: &RunConfig, layout: &Layout, mode: TokenizerMode, resume: bool) -> Result<()> {
    let vfm = load_vfm(layout)?;
    let train = load_corpus(&layout.data_train())?;
    let feats = embed(&vfm, &train)?;
    let black = vfm.black_frame(train[0].frame_size())?;
    let tcfg = TokenizerConfig { mode, ..cfg.tokenizer };
    let dir = layout.tokenizer(mode);
    let mut trainer = if resume {
        let ck = load_checkpoint(&dir)?;
        ck.expect(ckpt::TOKENIZER, &tcfg)?;
        check_seed(&ck, cfg)?;
        let tok = ckpt::load_tokenizer(&ck)?;
        let optimizer = AdamW::load_state(cfg.tokenizer_train.optim, ck.group("optim")?)?;
        TokenizerTrainer {
            tokenizer: tok,
            optimizer,
            config: cfg.tokenizer_train,
            seed: ck.seed,
        }
    } else {
        TokenizerTrainer::new(Tokenizer::new(tcfg, cfg.seed, black)?, cfg.tokenizer_train, cfg.seed)
    };
    let mut log = Log::open(dir.join("train_log.csv"), cfg, "step,loss", resume)?;
    let mut io = Ok(());
    trainer.run(&feats, |s, l| {
        if io.is_ok() {
            io = log.row(&format!("{s},{l:.8e}"));
        }
    })?;
    io?;
    ckpt::tokenizer_checkpoint(&trainer.tokenizer, trainer.seed, trainer.step_count())
        .with_group("optim", trainer.optimizer.state())
        .save(&dir)?;
    note(format!("wrote {}", dir.display()));

    let test = load_corpus(&layout.data_test())?;
    let mse = reconstruction_mse(&trainer.tokenizer, &embed(&vfm, &test)?)?;
    note(format!("{} tokenizer test reconstruction MSE {mse:.6}", mode.as_str()));
    write_json(
        &dir.join("summary.json"),
        cfg,
        json!({
            "mode": mode.as_str(),
            "steps": trainer.step_count(),
            "test_reconstruction_mse": mse,
        }),
    )
}

fn check_seed(ck: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    if ck.seed != cfg.seed {
        bail!(Error::Checkpoint(format!(
            "checkpoint was trained with seed {}, run config has seed {}",
            ck.seed, cfg.seed
        )));
    }
    Ok(())
}

fn predictor_config(cfg: &RunConfig, mode: Mode) -> PredictorConfig {
    PredictorConfig {
        variant: mode.variant(),
        ..cfg.predictor
    }
}

fn train_config(cfg: &RunConfig, mode: Mode) -> PredictorTrainConfig {
    PredictorTrainConfig {
        objective: mode.objective(),
        ..cfg.predictor_train
    }
}

/// Run `trainer` to its configured step count, logging every step.
fn run_trainer(trainer: &mut PredictorTrainer, cache: &mut TokenCache<'_>, log: &mut Log) -> Result<Vec<StepLog>> {
    let mut io = Ok(());
    let logs = trainer.run(cache, |l| {
        if io.is_ok() {
            io = log.row(&l.csv_row());
        }
    })?;
    io?;
    Ok(logs)
}

pub fn train_predictor(cfg: &RunConfig, layout: &Layout, mode: Mode, resume: bool) -> Result<()> {
    let vfm = load_vfm(layout)?;
    let tok = tokenizer_for(layout, mode.variant())?;
    let feats = embed(&vfm, &load_corpus(&layout.data_train())?)?;
    let dir = layout.predictor(mode);
    let pcfg = predictor_config(cfg, mode);
    let tcfg = train_config(cfg, mode);
    let mut trainer = if resume {
        let (ck, p) = load_mode_predictor(&dir, mode)?;
        ck.expect(ckpt::PREDICTOR, &pcfg)?;
        check_seed(&ck, cfg)?;
        let optimizer = AdamW::load_state(tcfg.optim, ck.group("optim")?)?;
        PredictorTrainer {
            predictor: p,
            optimizer,
            config: tcfg,
            seed: ck.seed,
        }
    } else {
        PredictorTrainer::new(Predictor::new(pcfg, cfg.seed)?, tcfg, cfg.seed)?
    };
    let mut cache = TokenCache::new(mode.variant(), &feats, tok.as_ref())?;
    let mut log = Log::open(dir.join("train_log.csv"), cfg, StepLog::CSV_HEADER, resume)?;
    let logs = run_trainer(&mut trainer, &mut cache, &mut log)?;
    predictor_checkpoint(mode, &trainer).save(&dir)?;
    note(format!("wrote {}", dir.display()));
    let tail = &logs[logs.len().saturating_sub(20)..];
    let avg = |f: fn(&StepLog) -> f64| tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64;
    write_json(
        &dir.join("summary.json"),
        cfg,
        json!({
            "mode": mode.name(),
            "steps": trainer.step_count(),
            "steps_this_run": logs.len(),
            "recent_l_bom": avg(|l| l.loss),
            "recent_mean_candidate_loss": avg(|l| l.mean_candidate_loss),
        }),
    )
}

/// The query distribution a mode is scored with: the learned query alone
/// for regression models, noise queries otherwise.
fn queries(cfg: &RunConfig, mode: Mode, p: &Predictor) -> QuerySource {
    match mode.objective() {
        deltaworld::bom::Objective::Discriminative => QuerySource::learned(p),
        deltaworld::bom::Objective::BestOfMany => QuerySource::noise(p.config.dim, cfg.eval.sigma),
    }
}

pub fn eval(cfg: &RunConfig, layout: &Layout, mode: Mode) -> Result<()> {
    let vfm = load_vfm(layout)?;
    let head = load_head(layout)?;
    let (_, p) = load_mode_predictor(&layout.predictor(mode), mode)?;
    let tok = tokenizer_for(layout, mode.variant())?;
    let test = load_corpus(&layout.data_test())?;
    let feats = embed(&vfm, &test)?;
    let model = WorldModel::new(&p, tok.as_ref())?;
    let qs = queries(cfg, mode, &p);
    let patch = vfm.config().patch_size;
    let rows = evaluate(&model, &test, &feats, &head, &cfg.eval, &qs, patch)?;
    let dir = layout.eval(mode);
    write(&dir.join("metrics.csv"), csv(cfg, MetricsRow::CSV_HEADER, rows.iter().map(MetricsRow::csv_row)))?;

    let mut bars = Vec::new();
    let mut summary = json!({ "mode": mode.name(), "k": cfg.eval.k });
    for h in [Horizon::Short, Horizon::Mid] {
        let hr: Vec<&MetricsRow> = rows.iter().filter(|r| r.horizon == h).collect();
        let s = summarize(&hr);
        note(format!(
            "{:<5} best mIoU {:.4} loss {:.5} | mean mIoU {:.4} loss {:.5} | copy-last mIoU {:.4} | present mIoU {:.4}",
            h.as_str(),
            s.best_miou,
            s.best_feature_loss,
            s.mean_miou,
            s.mean_feature_loss,
            s.copy_last_miou,
            s.present_miou
        ));
        for (method, miou, loss) in [
            ("best", s.best_miou, s.best_feature_loss),
            ("mean", s.mean_miou, s.mean_feature_loss),
            ("copy-last", s.copy_last_miou, s.copy_last_feature_loss),
            ("present", s.present_miou, 0.0),
        ] {
            bars.push(format!("{},{method},{miou:.6},{loss:.8e}", h.as_str()));
        }
        summary[h.as_str()] = serde_json::to_value(s)?;
    }
    if test[0].config.dynamics.branches() {
        let m = mode_recovery(&model, &test, &feats, &vfm, &head, &cfg.eval, &qs, patch)?;
        note(format!("mode coverage {:.3} centroid deviation {:.3}", m.coverage, m.centroid_deviation));
        summary["mode_recovery"] = serde_json::to_value(m)?;
    }
    write(&dir.join("bars.csv"), csv(cfg, crate::plot::BARS_HEADER, bars))?;
    write_json(&dir.join("summary.json"), cfg, summary)
}

pub fn flops(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let pipeline = PipelineConfig {
        frame_size: cfg.scenario.frame_size,
        vfm: cfg.vfm,
        tokenizer: cfg.tokenizer,
        predictor: cfg.predictor,
    };
    let f = &cfg.flops;
    let mut table = stamp(cfg);
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for variant in [Variant::Spatial, Variant::Frame, Variant::Delta] {
        for &ctx in &f.context_frames {
            let r = pipeline_breakdown(variant, f.k, ctx, f.rollout_steps, &pipeline)?;
            table.push_str(&r.to_table());
            table.push('\n');
            rows.extend(r.to_csv().lines().skip(1).map(str::to_string));
            for c in verify_against_counter(variant, ctx, &pipeline)? {
                if !c.matches() {
                    bail!(Error::Config(format!(
                        "{} {}: analytic {} MACs, counted {}",
                        variant.as_str(),
                        c.component,
                        c.analytic,
                        c.instrumented
                    )));
                }
                checks.push(format!("{},{ctx},{},{},{}", variant.as_str(), c.component, c.analytic, c.instrumented));
            }
        }
    }
    let dir = layout.flops();
    write(&dir.join("flops.csv"), csv(cfg, deltaworld::flops::FlopsReport::CSV_HEADER, rows))?;
    write(&dir.join("flops.txt"), table)?;
    write(
        &dir.join("counter_check.csv"),
        csv(cfg, "variant,context_frames,component,analytic_macs,counted_macs", checks),
    )
}

pub fn sweep(cfg: &RunConfig, layout: &Layout, mode: Mode) -> Result<()> {
    if mode.objective() != deltaworld::bom::Objective::BestOfMany {
        bail!(UsageError(format!("sweep needs a best-of-many mode, not {}", mode.name())));
    }
    let vfm = load_vfm(layout)?;
    let head = load_head(layout)?;
    let tok = tokenizer_for(layout, mode.variant())?;
    let train_feats = embed(&vfm, &load_corpus(&layout.data_train())?)?;
    let test = load_corpus(&layout.data_test())?;
    let test_feats = embed(&vfm, &test)?;
    let dir = layout.sweep(mode);
    let mut cache = TokenCache::new(mode.variant(), &train_feats, tok.as_ref())?;
    let mut io: Result<()> = Ok(());
    let train = |k: usize| -> deltaworld::Result<Predictor> {
        let tcfg = PredictorTrainConfig {
            k,
            ..train_config(cfg, mode)
        };
        let mut t = PredictorTrainer::new(Predictor::new(predictor_config(cfg, mode), cfg.seed)?, tcfg, cfg.seed)?;
        let sub = dir.join(format!("k{k}"));
        let run = Log::open(sub.join("train_log.csv"), cfg, StepLog::CSV_HEADER, false)
            .and_then(|mut log| run_trainer(&mut t, &mut cache, &mut log));
        match run {
            Ok(_) => {}
            Err(e) => match e.downcast::<Error>() {
                Ok(e) => return Err(e),
                Err(e) => {
                    io = Err(e);
                    return Err(Error::Config("training log failed".into()));
                }
            },
        }
        predictor_checkpoint(mode, &t).save(&sub)?;
        note(format!("trained train-K {k}"));
        Ok(t.predictor)
    };
    let cells = sweep_k(
        &cfg.sweep.train_ks,
        &cfg.sweep.eval_ks,
        train,
        tok.as_ref(),
        &test,
        &test_feats,
        &head,
        &cfg.eval,
        vfm.config().patch_size,
    );
    io?;
    let cells = cells?;
    write(&dir.join("sweep.csv"), csv(cfg, SweepCell::CSV_HEADER, cells.iter().map(SweepCell::csv_row)))?;
    let mut heat = Vec::new();
    for c in &cells {
        for (score, v) in [
            ("best_miou", c.best_miou),
            ("mean_miou", c.mean_miou),
            ("best_feature_loss", c.best_feature_loss),
            ("mean_feature_loss", c.mean_feature_loss),
        ] {
            heat.push(format!("{},{score},{},{},{v:.8e}", c.horizon.as_str(), c.train_k, c.eval_k));
        }
    }
    write(&dir.join("heatmap.csv"), csv(cfg, crate::plot::HEATMAP_HEADER, heat))
}
