//! On-disk formats.
//!
//! * Volume: `<name>.vol` holds raw little-endian `f32`, x fastest; the
//!   sidecar `<name>.json` holds `dims`, `spacing_mm` and `origin_mm`.
//!   Vector fields use the same layout with three interleaved components and
//!   a `field_type` entry in the sidecar.
//! * Sequence: a directory whose `manifest.json` lists the frame files in
//!   temporal order, optionally with a motion-free `reference`.
//! * CSV files start with the line `# spaer-csv v1`, then a header row.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffeo::VectorField;
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::temporal::EpochLog;
use crate::tracker::{PairReport, TrackingReport};
use crate::volume::{Grid, Volume};

pub const CSV_VERSION_LINE: &str = "# spaer-csv v1";
pub const TRAJECTORY_HEADER: &str = "frame,qw,qx,qy,qz,tx_mm,ty_mm,tz_mm";
pub const REPORT_HEADER: &str = "pair,trans_err_mm,ang_err_deg,dice,ssd_pre,ssd_post,secs";
pub const LOSS_HEADER: &str = "epoch,train_loss,val_loss,val_dist,val_geo,val_objective,learning_rate";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_type: Option<String>,
}

impl VolumeHeader {
    fn of(grid: &Grid, field_type: Option<&str>) -> Self {
        Self {
            dims: grid.dims,
            spacing_mm: grid.spacing.into(),
            origin_mm: grid.origin.into(),
            field_type: field_type.map(str::to_owned),
        }
    }

    fn grid(&self, path: &Path) -> Result<Grid> {
        Grid::new(self.dims, Vec3::from(self.spacing_mm), Vec3::from(self.origin_mm))
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_raw(path: &Path, header: &VolumeHeader, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar(path);
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

fn read_raw(path: &Path, components: usize) -> Result<(VolumeHeader, Grid, Vec<f64>)> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let grid = header.grid(&side)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = 4 * components * grid.len();
    if bytes.len() != expected {
        return Err(Error::format(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((header, grid, values))
}

/// Writes `path` (the `.vol` file) and its sidecar. Values are stored as
/// `f32`.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    write_raw(path, &VolumeHeader::of(&vol.grid, None), vol.data.iter().copied())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (header, grid, data) = read_raw(path, 1)?;
    if header.field_type.is_some() {
        return Err(Error::format(path, "expected a scalar volume, found a vector field"));
    }
    Ok(Volume { grid, data })
}

pub fn write_field(path: &Path, field: &VectorField, field_type: &str) -> Result<()> {
    let header = VolumeHeader::of(&field.grid, Some(field_type));
    write_raw(path, &header, field.data.iter().flat_map(|v| [v.x, v.y, v.z]))
}

/// Returns the field and its `field_type`.
pub fn read_field(path: &Path) -> Result<(VectorField, String)> {
    let (header, grid, values) = read_raw(path, 3)?;
    let kind = header.field_type.ok_or_else(|| Error::format(path, "missing field_type"))?;
    let data = values.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    Ok((VectorField::new(grid, data)?, kind))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Volume>,
    pub reference: Option<Volume>,
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.vol")
}

pub fn write_sequence(dir: &Path, frames: &[Volume], reference: Option<&Volume>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..frames.len()).map(frame_name).collect();
    for (name, f) in names.iter().zip(frames) {
        write_volume(&dir.join(name), f)?;
    }
    let reference_name = reference.map(|r| {
        let name = "reference.vol".to_string();
        write_volume(&dir.join(&name), r).map(|_| name)
    });
    let manifest = Manifest {
        frames: names,
        reference: reference_name.transpose()?,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let manifest = read_manifest(dir)?;
    let frames = manifest
        .frames
        .iter()
        .map(|name| read_volume(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    let reference = manifest.reference.as_ref().map(|name| read_volume(&dir.join(name))).transpose()?;
    Ok(Sequence { frames, reference })
}

/// Splits CSV text into data rows after checking the version line and header.
fn csv_rows<'a>(path: &Path, text: &'a str, header: &str) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_VERSION_LINE) {
        return Err(Error::format(path, format!("first line must be `{CSV_VERSION_LINE}`")));
    }
    if lines.next() != Some(header) {
        return Err(Error::format(path, format!("header must be `{header}`")));
    }
    let width = header.split(',').count();
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != width {
                return Err(Error::format(path, format!("row {} has {} fields, expected {width}", i + 1, cells.len())));
            }
            Ok(cells)
        })
        .collect()
}

fn parse_f64(path: &Path, cell: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| Error::format(path, format!("`{cell}` is not a number")))
}

fn parse_opt(path: &Path, cell: &str) -> Result<Option<f64>> {
    if cell.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(path, cell).map(Some)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn trajectory_csv(poses: &[RigidTransform]) -> String {
    let mut out = format!("{CSV_VERSION_LINE}\n{TRAJECTORY_HEADER}\n");
    for (t, q) in poses.iter().enumerate() {
        let [w, x, y, z] = q.quaternion();
        let v = q.translation;
        out.push_str(&format!("{t},{w},{x},{y},{z},{},{},{}\n", v.x, v.y, v.z));
    }
    out
}

/// Poses of every frame relative to frame 0.
pub fn write_trajectory(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    write_text(path, &trajectory_csv(poses))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = read_text(path)?;
    csv_rows(path, &text, TRAJECTORY_HEADER)?
        .into_iter()
        .enumerate()
        .map(|(t, cells)| {
            if cells[0].trim().parse::<usize>().ok() != Some(t) {
                return Err(Error::format(path, format!("row {} should be frame {t}", t + 1)));
            }
            let v: Vec<f64> = cells[1..].iter().map(|c| parse_f64(path, c)).collect::<Result<_>>()?;
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
            if !(norm - 1.0).abs().lt(&1e-6) {
                return Err(Error::format(path, format!("frame {t}: quaternion norm {norm} is not 1")));
            }
            Ok(RigidTransform::from_quaternion([v[0], v[1], v[2], v[3]], Vec3::new(v[4], v[5], v[6])))
        })
        .collect()
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv(report: &TrackingReport) -> String {
    let mut out = format!("{CSV_VERSION_LINE}\n{REPORT_HEADER}\n");
    for p in &report.pairs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.pair,
            p.trans_err_mm,
            p.ang_err_deg,
            opt_cell(p.dice),
            opt_cell(p.ssd_pre),
            opt_cell(p.ssd_post),
            opt_cell(p.secs)
        ));
    }
    out
}

pub fn write_report_csv(path: &Path, report: &TrackingReport) -> Result<()> {
    write_text(path, &report_csv(report))
}

/// Rows of a report CSV. Columns the CSV does not carry are left empty.
pub fn read_report_csv(path: &Path) -> Result<Vec<PairReport>> {
    let text = read_text(path)?;
    csv_rows(path, &text, REPORT_HEADER)?
        .into_iter()
        .map(|c| {
            Ok(PairReport {
                pair: c[0].trim().parse().map_err(|_| Error::format(path, format!("bad pair index `{}`", c[0])))?,
                trans_err_mm: parse_f64(path, c[1])?,
                ang_err_deg: parse_f64(path, c[2])?,
                acc_trans_err_mm: f64::NAN,
                acc_ang_err_deg: f64::NAN,
                dice: parse_opt(path, c[3])?,
                ssd_pre: parse_opt(path, c[4])?,
                ssd_post: parse_opt(path, c[5])?,
                ncc_pre: None,
                ncc_post: None,
                secs: parse_opt(path, c[6])?,
            })
        })
        .collect()
}

pub fn loss_csv(history: &[EpochLog]) -> String {
    let mut out = format!("{CSV_VERSION_LINE}\n{LOSS_HEADER}\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_loss, h.val_dist, h.val_geo, h.val_objective, h.learning_rate
        ));
    }
    out
}

pub fn write_loss_csv(path: &Path, history: &[EpochLog]) -> Result<()> {
    write_text(path, &loss_csv(history))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let text = read_text(path)?;
    csv_rows(path, &text, LOSS_HEADER)?
        .into_iter()
        .map(|c| {
            let v: Vec<f64> = c[1..].iter().map(|x| parse_f64(path, x)).collect::<Result<_>>()?;
            Ok(EpochLog {
                epoch: c[0].trim().parse().map_err(|_| Error::format(path, format!("bad epoch `{}`", c[0])))?,
                train_loss: v[0],
                val_loss: v[1],
                val_dist: v[2],
                val_geo: v[3],
                val_objective: v[4],
                learning_rate: v[5],
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
