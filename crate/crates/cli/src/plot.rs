//! Raster plots from the CSV plot data that `eval` and `sweep` emit. Each
//! input yields `<name>.png` and `<name>.csv` under `plots/`, where the CSV
//! holds exactly the plotted values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use anyhow::{bail, Context, Result};
use deltaworld::Error;
use image::{ImageFormat, Rgb, RgbImage};

use crate::commands::{stamp, write, Layout};
use crate::config::RunConfig;

pub const BARS_HEADER: &str = "horizon,method,miou,feature_loss";
pub const HEATMAP_HEADER: &str = "horizon,score,train_k,eval_k,value";

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([30, 30, 30]);

struct Data {
    comment: Option<String>,
    header: String,
    rows: Vec<Vec<String>>,
}

fn read(path: &Path) -> Result<Data> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let comment = text.lines().next().filter(|l| l.starts_with('#')).map(str::to_string);
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r
        .headers()
        .with_context(|| format!("reading {}", path.display()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(Data { comment, header, rows })
}

fn num(path: &Path, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| anyhow::Error::new(Error::Config(format!("{}: `{s}` is not a number", path.display()))))
}

pub fn plot(cfg: &RunConfig, layout: &Layout, inputs: &[impl AsRef<Path>]) -> Result<()> {
    for input in inputs {
        let path = input.as_ref();
        let data = read(path)?;
        let img = match data.header.as_str() {
            BARS_HEADER => bars(path, &data.rows)?,
            HEATMAP_HEADER => heatmaps(path, &data.rows)?,
            other => bail!(Error::Config(format!("{}: unrecognized plot data `{other}`", path.display()))),
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        let name = match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            Some(parent) => format!("{parent}-{stem}"),
            None => stem.to_string(),
        };
        let out = layout.plots();
        let mut png = Cursor::new(Vec::new());
        img.write_to(&mut png, ImageFormat::Png)?;
        write(&out.join(format!("{name}.png")), png.into_inner())?;
        let mut text = match data.comment {
            Some(c) => c + "\n",
            None => stamp(cfg),
        };
        text.push_str(&data.header);
        text.push('\n');
        for r in &data.rows {
            text.push_str(&r.join(","));
            text.push('\n');
        }
        write(&out.join(format!("{name}.csv")), text)?;
    }
    Ok(())
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, c: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Group rows by their first column, keeping first-seen order.
fn panels<'a>(rows: &'a [Vec<String>], key: impl Fn(&Vec<String>) -> String) -> Vec<(String, Vec<&'a Vec<String>>)> {
    let mut out: Vec<(String, Vec<&Vec<String>>)> = Vec::new();
    for r in rows {
        let k = key(r);
        match out.iter_mut().find(|(name, _)| *name == k) {
            Some((_, v)) => v.push(r),
            None => out.push((k, vec![r])),
        }
    }
    out
}

fn method_color(m: &str) -> Rgb<u8> {
    match m {
        "best" => Rgb([52, 101, 164]),
        "mean" => Rgb([245, 121, 0]),
        "copy-last" => Rgb([136, 138, 133]),
        "present" => Rgb([78, 154, 6]),
        _ => Rgb([117, 80, 123]),
    }
}

/// One panel per horizon, one bar per method, height = mIoU.
fn bars(path: &Path, rows: &[Vec<String>]) -> Result<RgbImage> {
    const BAR: u32 = 36;
    const GAP: u32 = 8;
    const H: u32 = 200;
    const PAD: u32 = 16;
    let groups = panels(rows, |r| r[0].clone());
    if groups.is_empty() {
        bail!(Error::Config(format!("{}: no rows to plot", path.display())));
    }
    let widths: Vec<u32> = groups.iter().map(|(_, g)| g.len() as u32 * (BAR + GAP) + GAP).collect();
    let width = widths.iter().sum::<u32>() + PAD * (groups.len() as u32 + 1);
    let mut img = RgbImage::from_pixel(width, H + 2 * PAD, WHITE);
    let mut x = PAD;
    for ((_, g), w) in groups.iter().zip(&widths) {
        for (i, r) in g.iter().enumerate() {
            let v = num(path, &r[2])?.clamp(0.0, 1.0);
            let h = (v * H as f64).round() as u32;
            fill(&mut img, x + GAP + i as u32 * (BAR + GAP), PAD + H - h, BAR, h, method_color(&r[1]));
        }
        fill(&mut img, x, PAD + H, *w, 2, INK);
        x += w + PAD;
    }
    Ok(img)
}

fn ramp(t: f64) -> Rgb<u8> {
    let lo = [68.0, 1.0, 84.0];
    let hi = [253.0, 231.0, 37.0];
    let c = |i: usize| (lo[i] + (hi[i] - lo[i]) * t.clamp(0.0, 1.0)).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// One panel per (horizon, score): rows are train-K, columns eval-K, color
/// scaled to the panel's own range.
fn heatmaps(path: &Path, rows: &[Vec<String>]) -> Result<RgbImage> {
    const CELL: u32 = 40;
    const PAD: u32 = 16;
    let groups = panels(rows, |r| format!("{}/{}", r[0], r[1]));
    if groups.is_empty() {
        bail!(Error::Config(format!("{}: no rows to plot", path.display())));
    }
    let mut grids = Vec::new();
    let (mut width, mut height) = (PAD, 0);
    for (_, g) in &groups {
        let mut cells = BTreeMap::new();
        for r in g {
            let tk: u64 = num(path, &r[2])? as u64;
            let ek: u64 = num(path, &r[3])? as u64;
            cells.insert((tk, ek), num(path, &r[4])?);
        }
        let tks: Vec<u64> = cells.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let eks: Vec<u64> = cells.keys().map(|k| k.1).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        width += eks.len() as u32 * CELL + PAD;
        height = height.max(tks.len() as u32 * CELL);
        grids.push((cells, tks, eks));
    }
    let mut img = RgbImage::from_pixel(width, height + 2 * PAD, WHITE);
    let mut x = PAD;
    for (cells, tks, eks) in &grids {
        let lo = cells.values().copied().fold(f64::INFINITY, f64::min);
        let hi = cells.values().copied().fold(f64::NEG_INFINITY, f64::max);
        for (i, tk) in tks.iter().enumerate() {
            for (j, ek) in eks.iter().enumerate() {
                let c = match cells.get(&(*tk, *ek)) {
                    Some(v) if hi > lo => ramp((v - lo) / (hi - lo)),
                    Some(_) => ramp(0.5),
                    None => WHITE,
                };
                fill(&mut img, x + j as u32 * CELL, PAD + i as u32 * CELL, CELL - 1, CELL - 1, c);
            }
        }
        x += eks.len() as u32 * CELL + PAD;
    }
    Ok(img)
}
