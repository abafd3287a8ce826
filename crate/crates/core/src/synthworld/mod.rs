//! Synthetic moving-squares videos with controllable stochastic dynamics.
//!
//! Objects are hard-edged axis-aligned squares on a flat background. A pixel
//! belongs to a square when its center lies in `[x - s/2, x + s/2)` (same for
//! y), so labels are exact. Squares reflect off the frame borders.
//!
//! In `bimodal-branch` mode the single object is placed so that it reaches the
//! vertical center line exactly at `branch_frame`; on the step that follows,
//! its horizontal velocity flips sign with probability `branch_prob`. The
//! branch is therefore identifiable from context while its outcome is not.
//! `multi-agent` mode draws several free objects, each flipping independently
//! at `branch_frame`.

pub(crate) mod dataset;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{read_dataset, write_dataset, DATASET_FORMAT, DATASET_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dynamics {
    DeterministicDrift,
    BimodalBranch,
    MultiAgent,
}

impl Dynamics {
    pub fn as_str(self) -> &'static str {
        match self {
            Dynamics::DeterministicDrift => "deterministic-drift",
            Dynamics::BimodalBranch => "bimodal-branch",
            Dynamics::MultiAgent => "multi-agent",
        }
    }

    pub fn branches(self) -> bool {
        !matches!(self, Dynamics::DeterministicDrift)
    }
}

impl std::str::FromStr for Dynamics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic-drift" => Ok(Dynamics::DeterministicDrift),
            "bimodal-branch" => Ok(Dynamics::BimodalBranch),
            "multi-agent" => Ok(Dynamics::MultiAgent),
            other => Err(Error::Config(format!("unknown dynamics `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub frame_size: usize,
    pub num_objects: usize,
    pub dynamics: Dynamics,
    pub branch_prob: f64,
    pub fps: f64,
    pub duration: f64,
    /// RGB colors in `[0, 1]`; entry 0 is the background, and an object's
    /// class id is the index of its color.
    pub palette: Vec<[f32; 3]>,
    /// Side length of each square in pixels.
    pub object_size: usize,
    /// Object speed in pixels per frame.
    pub speed: f64,
    /// Fixed `(vx, vy)` for every object instead of a random heading.
    pub velocity: Option<[f64; 2]>,
    /// Frame after which branch decisions apply; defaults to the middle frame.
    pub branch_frame: Option<usize>,
    /// Patch size of the feature extractor the frames are meant for.
    pub patch_size: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            frame_size: 64,
            num_objects: 1,
            dynamics: Dynamics::BimodalBranch,
            branch_prob: 0.5,
            fps: 10.0,
            duration: 2.4,
            palette: default_palette(),
            object_size: 16,
            speed: 3.0,
            velocity: None,
            branch_frame: None,
            patch_size: 8,
        }
    }
}

pub fn default_palette() -> Vec<[f32; 3]> {
    vec![
        [0.2, 0.2, 0.2],
        [0.9, 0.15, 0.15],
        [0.15, 0.8, 0.2],
        [0.2, 0.35, 0.95],
        [0.95, 0.85, 0.1],
    ]
}

impl ScenarioConfig {
    /// Small bimodal scene used by smoke runs and acceptance checks: 32 px
    /// frames (a 4x4 patch grid), branch at frame 8.
    pub fn desk() -> Self {
        Self {
            frame_size: 32,
            object_size: 8,
            speed: 1.5,
            branch_frame: Some(8),
            ..Self::default()
        }
    }

    pub fn num_frames(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn branch_frame(&self) -> usize {
        self.branch_frame.unwrap_or(self.num_frames().saturating_sub(1) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.frame_size == 0 || self.frame_size % self.patch_size != 0 {
            return bad(format!(
                "frame_size {} must be a positive multiple of patch_size {}",
                self.frame_size, self.patch_size
            ));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return bad(format!("branch_prob {} outside [0, 1]", self.branch_prob));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps {} must be positive", self.fps));
        }
        if self.num_frames() == 0 {
            return bad("duration * fps rounds to zero frames".into());
        }
        if self.palette.len() < 2 || self.palette.len() > 256 {
            return bad("palette needs a background and 1..=255 object colors".into());
        }
        if self
            .palette
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return bad("palette colors must lie in [0, 1]".into());
        }
        if self.object_size == 0 || self.object_size > self.frame_size {
            return bad(format!("object_size {} does not fit the frame", self.object_size));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return bad("speed must be finite and non-negative".into());
        }
        if self.dynamics == Dynamics::BimodalBranch && self.num_objects != 1 {
            return bad("bimodal-branch uses exactly one object".into());
        }
        if self.dynamics.branches() && self.branch_frame() >= self.num_frames() {
            return bad(format!(
                "branch_frame {} beyond the last frame",
                self.branch_frame()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub class: u8,
    /// Center, pixels.
    pub x: f64,
    pub y: f64,
    /// Velocity the object arrived with, pixels per frame.
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchDecision {
    pub object: usize,
    /// Decision applies to the step from `frame` to `frame + 1`.
    pub frame: usize,
    pub flipped: bool,
    /// Sign of the horizontal velocity after the branch.
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTrace {
    /// Per frame, per object.
    pub states: Vec<Vec<ObjectState>>,
    pub branches: Vec<BranchDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    /// `(T, H, W, 3)` row-major.
    pub frames: Vec<f32>,
    pub timestamps: Vec<f64>,
    pub trace: LatentTrace,
    /// `(T, H, W)` class ids.
    pub labels: Vec<u8>,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn frame_size(&self) -> usize {
        self.config.frame_size
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_size() * self.frame_size() * 3;
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> &[u8] {
        let n = self.frame_size() * self.frame_size();
        &self.labels[i * n..(i + 1) * n]
    }

    /// Direction taken at the first recorded branch, if any.
    pub fn branch_direction(&self) -> Option<Direction> {
        self.trace.branches.first().map(|b| b.direction)
    }
}

/// Reflect a coordinate into `[lo, hi]`, flipping the velocity on contact.
fn reflect(mut p: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if hi <= lo {
        return (lo, v);
    }
    for _ in 0..8 {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            break;
        }
    }
    (p.clamp(lo, hi), v)
}

fn step(s: &ObjectState, flip: bool, lo: f64, hi: f64) -> ObjectState {
    let vx = if flip { -s.vx } else { s.vx };
    let (x, vx) = reflect(s.x + vx, vx, lo, hi);
    let (y, vy) = reflect(s.y + s.vy, s.vy, lo, hi);
    ObjectState { x, y, vx, vy, ..*s }
}

fn bounds(cfg: &ScenarioConfig) -> (f64, f64) {
    let half = cfg.object_size as f64 / 2.0;
    (half, cfg.frame_size as f64 - half)
}

fn random_object(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> ObjectState {
    let (lo, hi) = bounds(cfg);
    let class = rng.gen_range(1..cfg.palette.len()) as u8;
    let x = rng.gen_range(lo..=hi);
    let y = rng.gen_range(lo..=hi);
    let (vx, vy) = match cfg.velocity {
        Some([vx, vy]) => (vx, vy),
        None => {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            (cfg.speed * a.cos(), cfg.speed * a.sin())
        }
    };
    ObjectState { class, x, y, vx, vy }
}

/// The bimodal object's states for frames `0..=b`, ending on the center line.
fn bimodal_prefix(cfg: &ScenarioConfig, b: usize, rng: &mut ChaCha8Rng) -> Vec<ObjectState> {
    let (lo, hi) = bounds(cfg);
    let class = rng.gen_range(1..cfg.palette.len()) as u8;
    let (vx, vy) = match cfg.velocity {
        Some([vx, vy]) => (vx, vy),
        None => {
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let vy = rng.gen_range(-0.25..=0.25) * cfg.speed;
            (dir * cfg.speed, vy)
        }
    };
    let y = rng.gen_range(lo..=hi);
    let end = ObjectState {
        class,
        x: cfg.frame_size as f64 / 2.0,
        y,
        vx,
        vy,
    };
    // run time backwards: reversed velocity, same reflection rule
    let mut states = vec![end];
    // the arrival velocity at frame i is minus the backward velocity there
    let mut cur = ObjectState {
        vx: -vx,
        vy: -vy,
        ..end
    };
    for _ in 0..b {
        cur = step(&cur, false, lo, hi);
        states.push(ObjectState {
            vx: -cur.vx,
            vy: -cur.vy,
            ..cur
        });
    }
    states.reverse();
    states
}

/// Roll objects forward from frame `start` to the end, applying `flips`
/// (indexed by object) on the step out of `branch_frame`.
fn roll_forward(
    cfg: &ScenarioConfig,
    states: &mut Vec<Vec<ObjectState>>,
    branch_frame: Option<usize>,
    flips: &[bool],
) {
    let (lo, hi) = bounds(cfg);
    let t = cfg.num_frames();
    while states.len() < t {
        let i = states.len() - 1;
        let next = states[i]
            .iter()
            .enumerate()
            .map(|(o, s)| step(s, branch_frame == Some(i) && flips[o], lo, hi))
            .collect();
        states.push(next);
    }
}

fn decisions(
    states: &[Vec<ObjectState>],
    branch_frame: usize,
    flips: &[bool],
) -> Vec<BranchDecision> {
    flips
        .iter()
        .enumerate()
        .map(|(o, &flipped)| {
            let vx = states[branch_frame][o].vx;
            let after = if flipped { -vx } else { vx };
            BranchDecision {
                object: o,
                frame: branch_frame,
                flipped,
                direction: if after < 0.0 {
                    Direction::Left
                } else {
                    Direction::Right
                },
            }
        })
        .collect()
}

/// Simulate the latent trajectory without rendering.
pub fn simulate_trace(config: &ScenarioConfig, seed: u64) -> Result<LatentTrace> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = config.num_frames();
    let b = config.branch_frame();
    let mut states: Vec<Vec<ObjectState>>;
    match config.dynamics {
        Dynamics::DeterministicDrift => {
            let first = (0..config.num_objects)
                .map(|_| random_object(config, &mut rng))
                .collect();
            states = vec![first];
            roll_forward(config, &mut states, None, &[]);
            Ok(LatentTrace {
                states,
                branches: Vec::new(),
            })
        }
        Dynamics::BimodalBranch => {
            let prefix = bimodal_prefix(config, b, &mut rng);
            states = prefix.into_iter().map(|s| vec![s]).collect();
            states.truncate(t);
            let flips = [rng.gen_bool(config.branch_prob)];
            roll_forward(config, &mut states, Some(b), &flips);
            let branches = decisions(&states, b, &flips);
            Ok(LatentTrace { states, branches })
        }
        Dynamics::MultiAgent => {
            let first = (0..config.num_objects)
                .map(|_| random_object(config, &mut rng))
                .collect();
            states = vec![first];
            let flips: Vec<bool> = (0..config.num_objects)
                .map(|_| rng.gen_bool(config.branch_prob))
                .collect();
            roll_forward(config, &mut states, Some(b), &flips);
            let branches = decisions(&states, b, &flips);
            Ok(LatentTrace { states, branches })
        }
    }
}

/// Rasterize one frame into `pixels` (`H*W*3`) and `labels` (`H*W`).
fn render(cfg: &ScenarioConfig, objects: &[ObjectState], pixels: &mut [f32], labels: &mut [u8]) {
    let n = cfg.frame_size;
    let bg = cfg.palette[0];
    for p in pixels.chunks_mut(3) {
        p.copy_from_slice(&bg);
    }
    labels.fill(0);
    let half = cfg.object_size as f64 / 2.0;
    for o in objects {
        let color = cfg.palette[o.class as usize];
        // pixel i is covered when x - half <= i + 0.5 < x + half
        let span = |c: f64| {
            let lo = (c - half - 0.5).ceil().max(0.0) as usize;
            let hi = ((c + half - 0.5).ceil().max(0.0) as usize).min(n);
            (lo, hi)
        };
        let (x0, x1) = span(o.x);
        let (y0, y1) = span(o.y);
        for py in y0..y1 {
            for px in x0..x1 {
                let i = py * n + px;
                labels[i] = o.class;
                pixels[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
        }
    }
}

fn render_sequence(id: String, seed: u64, config: &ScenarioConfig, trace: LatentTrace) -> VideoSequence {
    let t = trace.states.len();
    let n = config.frame_size;
    let mut frames = vec![0.0; t * n * n * 3];
    let mut labels = vec![0; t * n * n];
    for (i, objs) in trace.states.iter().enumerate() {
        render(
            config,
            objs,
            &mut frames[i * n * n * 3..(i + 1) * n * n * 3],
            &mut labels[i * n * n..(i + 1) * n * n],
        );
    }
    let timestamps = (0..t).map(|i| i as f64 / config.fps).collect();
    VideoSequence {
        id,
        seed,
        config: config.clone(),
        frames,
        timestamps,
        trace,
        labels,
    }
}

pub fn generate_sequence(config: &ScenarioConfig, seed: u64) -> Result<VideoSequence> {
    let trace = simulate_trace(config, seed)?;
    Ok(render_sequence(format!("seed-{seed}"), seed, config, trace))
}

/// `n` sequences with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_corpus(config: &ScenarioConfig, n: usize, base_seed: u64) -> Result<Vec<VideoSequence>> {
    (0..n as u64)
        .map(|i| {
            let mut s = generate_sequence(config, base_seed.wrapping_add(i))?;
            s.id = format!("seq-{i:05}");
            Ok(s)
        })
        .collect()
}

/// `n` continuations of `seq` sharing frames `0..=t_branch` exactly, with
/// every branch decision taken at or after `t_branch` redrawn. When all
/// `2^m` outcomes of the `m` open decisions fit in `n`, distinct outcomes
/// are enumerated (in a seeded order) before any repeats.
pub fn branch_futures(
    seq: &VideoSequence,
    t_branch: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<VideoSequence>> {
    if t_branch >= seq.len() {
        return Err(Error::OutOfRange(format!(
            "t_branch {t_branch} for a sequence of {} frames",
            seq.len()
        )));
    }
    let cfg = &seq.config;
    let open: Vec<&BranchDecision> = seq
        .trace
        .branches
        .iter()
        .filter(|b| b.frame >= t_branch)
        .collect();
    let m = open.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcomes: Vec<Vec<bool>> = if m < 16 && n <= 1usize << m {
        let mut all: Vec<usize> = (0..1usize << m).collect();
        all.shuffle(&mut rng);
        all.into_iter()
            .take(n)
            .map(|code| (0..m).map(|j| code >> j & 1 == 1).collect())
            .collect()
    } else {
        (0..n)
            .map(|_| (0..m).map(|_| rng.gen_bool(cfg.branch_prob)).collect())
            .collect()
    };
    let nf = cfg.frame_size * cfg.frame_size;
    outcomes
        .into_iter()
        .enumerate()
        .map(|(k, outcome)| {
            let mut states: Vec<Vec<ObjectState>> = seq.trace.states[..=t_branch].to_vec();
            let mut branches: Vec<BranchDecision> = seq
                .trace
                .branches
                .iter()
                .filter(|b| b.frame < t_branch)
                .copied()
                .collect();
            let mut flips = vec![false; states[0].len()];
            let mut branch_frame = None;
            for (d, &f) in open.iter().zip(&outcome) {
                flips[d.object] = f;
                branch_frame = Some(d.frame);
            }
            roll_forward(cfg, &mut states, branch_frame, &flips);
            if let Some(bf) = branch_frame {
                let all = decisions(&states, bf, &flips);
                branches.extend(
                    all.into_iter()
                        .filter(|d| open.iter().any(|o| o.object == d.object)),
                );
            }
            let mut out = render_sequence(
                format!("{}-future-{k}", seq.id),
                seq.seed,
                cfg,
                LatentTrace { states, branches },
            );
            // the shared prefix is copied, not re-rendered
            let keep = (t_branch + 1) * nf;
            out.frames[..keep * 3].copy_from_slice(&seq.frames[..keep * 3]);
            out.labels[..keep].copy_from_slice(&seq.labels[..keep]);
            Ok(out)
        })
        .collect()
}

/// Mean `(x, y)` pixel coordinate (pixel centers) of all non-background
/// labels in frame `i`, or `None` when the frame is empty.
pub fn label_centroid(seq: &VideoSequence, i: usize) -> Option<(f64, f64)> {
    let n = seq.frame_size();
    let (mut sx, mut sy, mut c) = (0.0, 0.0, 0usize);
    for (k, &l) in seq.label(i).iter().enumerate() {
        if l != 0 {
            sx += (k % n) as f64 + 0.5;
            sy += (k / n) as f64 + 0.5;
            c += 1;
        }
    }
    (c > 0).then(|| (sx / c as f64, sy / c as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dynamics: Dynamics) -> ScenarioConfig {
        ScenarioConfig {
            frame_size: 32,
            object_size: 8,
            speed: 1.5,
            dynamics,
            branch_frame: Some(8),
            ..Default::default()
        }
    }

    #[test]
    fn zero_velocity_is_static() {
        let cfg = ScenarioConfig {
            dynamics: Dynamics::DeterministicDrift,
            velocity: Some([0.0, 0.0]),
            ..small(Dynamics::DeterministicDrift)
        };
        let s = generate_sequence(&cfg, 3).unwrap();
        for i in 1..s.len() {
            assert_eq!(s.frame(i), s.frame(0));
            assert_eq!(s.label(i), s.label(0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for d in [Dynamics::DeterministicDrift, Dynamics::BimodalBranch, Dynamics::MultiAgent] {
            let mut cfg = small(d);
            if d == Dynamics::MultiAgent {
                cfg.num_objects = 3;
            }
            let a = generate_sequence(&cfg, 11).unwrap();
            let b = generate_sequence(&cfg, 11).unwrap();
            assert_eq!(a, b);
            let bits = |s: &VideoSequence| s.frames.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn drift_centroid_follows_trace() {
        let cfg = ScenarioConfig {
            frame_size: 64,
            object_size: 8,
            dynamics: Dynamics::DeterministicDrift,
            velocity: Some([2.0, 0.0]),
            duration: 1.0,
            ..Default::default()
        };
        // pick a seed whose object does not touch the right wall in 10 frames
        let seq = (0..100)
            .map(|s| generate_sequence(&cfg, s).unwrap())
            .find(|s| s.trace.states[0][0].x + 2.0 * 9.0 <= 60.0)
            .unwrap();
        let mut prev = label_centroid(&seq, 0).unwrap();
        for i in 1..seq.len() {
            let c = label_centroid(&seq, i).unwrap();
            assert!(((c.0 - prev.0) - 2.0).abs() <= 0.5, "frame {i}: {prev:?} -> {c:?}");
            assert!((c.0 - seq.trace.states[i][0].x).abs() <= 0.5);
            prev = c;
        }
    }

    #[test]
    fn labels_match_pixels() {
        let cfg = ScenarioConfig {
            num_objects: 3,
            ..small(Dynamics::MultiAgent)
        };
        let s = generate_sequence(&cfg, 5).unwrap();
        for (k, &l) in s.labels.iter().enumerate() {
            let px = &s.frames[k * 3..k * 3 + 3];
            assert_eq!(px, &cfg.palette[l as usize]);
        }
        // an 8-pixel square covers exactly 64 pixels when fully inside
        let count = s.label(0).iter().filter(|&&l| l != 0).count();
        assert!(count <= 3 * 64 && count > 0);
    }

    #[test]
    fn bimodal_reaches_center_at_branch() {
        let cfg = small(Dynamics::BimodalBranch);
        for seed in 0..50 {
            let t = simulate_trace(&cfg, seed).unwrap();
            assert_eq!(t.states[8][0].x, 16.0);
            assert_eq!(t.branches.len(), 1);
            let after = t.states[9][0].x - 16.0;
            match t.branches[0].direction {
                Direction::Left => assert!(after < 0.0),
                Direction::Right => assert!(after > 0.0),
            }
        }
    }

    #[test]
    fn branch_statistics() {
        let cfg = small(Dynamics::BimodalBranch);
        let n = 10_000;
        let (mut left, mut flipped) = (0, 0);
        for seed in 0..n {
            let t = simulate_trace(&cfg, seed).unwrap();
            left += (t.branches[0].direction == Direction::Left) as usize;
            flipped += t.branches[0].flipped as usize;
        }
        let lf = left as f64 / n as f64;
        let ff = flipped as f64 / n as f64;
        assert!((0.48..=0.52).contains(&lf), "left fraction {lf}");
        assert!((0.48..=0.52).contains(&ff), "flip fraction {ff}");
    }

    #[test]
    fn futures_enumerate_both_branches() {
        let cfg = small(Dynamics::BimodalBranch);
        let seq = generate_sequence(&cfg, 2).unwrap();
        let fut = branch_futures(&seq, 8, 2, 9).unwrap();
        let mut dirs: Vec<Direction> = fut.iter().map(|f| f.branch_direction().unwrap()).collect();
        dirs.sort_by_key(|d| *d == Direction::Right);
        assert_eq!(dirs, vec![Direction::Left, Direction::Right]);
        for f in &fut {
            assert_eq!(&f.frames[..9 * 32 * 32 * 3], &seq.frames[..9 * 32 * 32 * 3]);
        }
        // one of the two futures is the original
        assert!(fut.iter().any(|f| f.frames == seq.frames));
        assert!(fut[0].frames != fut[1].frames);
    }

    #[test]
    fn deterministic_futures_are_identical() {
        let cfg = small(Dynamics::DeterministicDrift);
        let seq = generate_sequence(&cfg, 4).unwrap();
        let fut = branch_futures(&seq, 3, 5, 1).unwrap();
        for f in &fut {
            assert_eq!(f.frames, seq.frames);
        }
        assert!(matches!(branch_futures(&seq, seq.len(), 2, 0), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small(Dynamics::BimodalBranch);
        c.frame_size = 30;
        assert!(matches!(generate_sequence(&c, 0), Err(Error::Config(_))));
        let mut c = small(Dynamics::BimodalBranch);
        c.branch_prob = 1.5;
        assert!(matches!(generate_sequence(&c, 0), Err(Error::Config(_))));
        let mut c = small(Dynamics::BimodalBranch);
        c.fps = 0.0;
        assert!(matches!(generate_sequence(&c, 0), Err(Error::Config(_))));
    }
}
