//! On-disk dataset container.
//!
//! ```text
//! <dir>/manifest.json            format, version, one entry per sequence
//! <dir>/<id>.frames.f32          (T, H, W, 3) little-endian f32, row-major
//! <dir>/<id>.labels.u8           (T, H, W) class ids
//! <dir>/<id>.trace.json          latent trace
//! ```
//!
//! Each manifest entry carries `id, t, frame_size, fps, seed, dynamics`, the
//! full scenario config and the timestamps. Reading validates every blob's
//! length before returning anything.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dynamics, LatentTrace, ScenarioConfig, VideoSequence};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "deltaworld-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    sequences: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    id: String,
    t: usize,
    frame_size: usize,
    fps: f64,
    seed: u64,
    dynamics: Dynamics,
    config: ScenarioConfig,
    timestamps: Vec<f64>,
    frames: String,
    labels: String,
    trace: String,
}

/// Byte offset of a 1-based `(line, column)` position in `text`.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let mut offset = 0usize;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1).min(l.len())) as u64;
        }
        offset += l.len();
    }
    text.len() as u64
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: e.valid_up_to() as u64,
        msg: "invalid utf-8".into(),
    })?;
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        msg: e.to_string(),
    })
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Error::Config(format!("unsafe file name `{name}`")));
    }
    Ok(())
}

pub fn write_dataset(sequences: &[VideoSequence], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(sequences.len());
    for s in sequences {
        check_name(&s.id)?;
        let frames = format!("{}.frames.f32", s.id);
        let labels = format!("{}.labels.u8", s.id);
        let trace = format!("{}.trace.json", s.id);
        let mut buf = Vec::with_capacity(s.frames.len() * 4);
        for v in &s.frames {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write(&dir.join(&frames), &buf)?;
        write(&dir.join(&labels), &s.labels)?;
        let tj = serde_json::to_vec_pretty(&s.trace).expect("trace serializes");
        write(&dir.join(&trace), &tj)?;
        entries.push(Entry {
            id: s.id.clone(),
            t: s.len(),
            frame_size: s.frame_size(),
            fps: s.config.fps,
            seed: s.seed,
            dynamics: s.config.dynamics,
            config: s.config.clone(),
            timestamps: s.timestamps.clone(),
            frames,
            labels,
            trace,
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        sequences: entries,
    };
    let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write(&dir.join("manifest.json"), &text)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn blob_len_err(path: PathBuf, got: usize, want: usize) -> Error {
    Error::Parse {
        path,
        offset: got.min(want) as u64,
        msg: format!("expected {want} bytes, found {got}"),
    }
}

pub fn read_dataset(dir: &Path) -> Result<Vec<VideoSequence>> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = parse_json(&mpath, &read(&mpath)?)?;
    if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
        return Err(Error::Parse {
            path: mpath,
            offset: 0,
            msg: format!(
                "unsupported dataset format {} v{}",
                manifest.format, manifest.version
            ),
        });
    }
    let mut out = Vec::with_capacity(manifest.sequences.len());
    for e in manifest.sequences {
        for name in [&e.frames, &e.labels, &e.trace] {
            check_name(name)?;
        }
        let n = e.frame_size;
        if e.config.frame_size != n || e.timestamps.len() != e.t {
            return Err(Error::Parse {
                path: mpath.clone(),
                offset: 0,
                msg: format!("inconsistent metadata for sequence {}", e.id),
            });
        }
        let fpath = dir.join(&e.frames);
        let fbytes = read(&fpath)?;
        let want = e.t * n * n * 3 * 4;
        if fbytes.len() != want {
            return Err(blob_len_err(fpath, fbytes.len(), want));
        }
        let frames = fbytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let lpath = dir.join(&e.labels);
        let labels = read(&lpath)?;
        if labels.len() != e.t * n * n {
            return Err(blob_len_err(lpath, labels.len(), e.t * n * n));
        }
        let tpath = dir.join(&e.trace);
        let trace: LatentTrace = parse_json(&tpath, &read(&tpath)?)?;
        if trace.states.len() != e.t {
            return Err(Error::Parse {
                path: tpath,
                offset: 0,
                msg: "trace length differs from frame count".into(),
            });
        }
        out.push(VideoSequence {
            id: e.id,
            seed: e.seed,
            config: e.config,
            frames,
            timestamps: e.timestamps,
            trace,
            labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_count_bytes() {
        let text = "ab\ncde\nf";
        assert_eq!(byte_offset(text, 1, 1), 0);
        assert_eq!(byte_offset(text, 2, 2), 4);
        assert_eq!(byte_offset(text, 3, 1), 7);
    }
}
