//! Directory archive.
//!
//! ```text
//! <db>/manifest.json                 DatabaseManifest
//! <db>/<traj>/manifest.json          TrajectoryManifest
//! <db>/<traj>/steps.jsonl            one StepRecord per frame
//! <db>/<traj>/frames/000000.png      8-bit RGB, zero-padded frame index
//! ```
//!
//! Trajectories are written to a temporary sibling and renamed into place, so
//! a directory that exists with a manifest is complete.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Database, DatasetError, DomainTag, SourceTag, Step, Trajectory};
use crate::sim::{ActionVector, Observation, Pose};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub schema_version: u32,
    pub scene_id: String,
    pub length: usize,
    pub source_tag: SourceTag,
    pub image_size: usize,
    pub intervention_frame: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatabaseManifest {
    pub schema_version: u32,
    pub name: String,
    pub domain_tag: DomainTag,
    /// Paths relative to the database directory.
    pub trajectories: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    t: usize,
    frame_index: u64,
    action: ActionVector,
    theta: f64,
    pose: Pose,
}

fn archive_err(path: &Path, reason: impl ToString) -> DatasetError {
    DatasetError::Archive { path: path.display().to_string(), reason: reason.to_string() }
}

pub fn trajectory_dir_name(scene_id: &str, index: usize) -> String {
    format!("{scene_id}_{index:03}")
}

fn write_png(path: &Path, obs: &Observation) -> Result<(), DatasetError> {
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, obs.size as u32, obs.size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| archive_err(path, e))?;
    w.write_image_data(&obs.image).map_err(|e| archive_err(path, e))?;
    w.finish().map_err(|e| archive_err(path, e))
}

fn read_png(path: &Path) -> Result<(Vec<u8>, usize), DatasetError> {
    let dec = png::Decoder::new(BufReader::new(fs::File::open(path)?));
    let mut reader = dec.read_info().map_err(|e| archive_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| archive_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| archive_err(path, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight || info.width != info.height {
        return Err(archive_err(path, "expected square 8-bit RGB"));
    }
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize))
}

/// Writes `traj` to `dir` (replacing anything there).
pub fn save_trajectory(dir: &Path, traj: &Trajectory) -> Result<(), DatasetError> {
    traj.validate()?;
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(tmp.join("frames"))?;
    let manifest = TrajectoryManifest {
        schema_version: SCHEMA_VERSION,
        scene_id: traj.scene_id.clone(),
        length: traj.len(),
        source_tag: traj.source_tag,
        image_size: traj.image_size(),
        intervention_frame: traj.intervention_frame,
    };
    fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    let mut steps = BufWriter::new(fs::File::create(tmp.join("steps.jsonl"))?);
    for (t, s) in traj.steps.iter().enumerate() {
        let rec = StepRecord { t, frame_index: s.observation.frame_index, action: s.action, theta: s.theta, pose: s.pose };
        serde_json::to_writer(&mut steps, &rec).map_err(|e| archive_err(dir, e))?;
        steps.write_all(b"\n")?;
        write_png(&tmp.join("frames").join(format!("{t:06}.png")), &s.observation)?;
    }
    steps.flush()?;
    drop(steps);
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn load_trajectory(dir: &Path) -> Result<Trajectory, DatasetError> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| archive_err(dir, e))?;
    let m: TrajectoryManifest = serde_json::from_str(&text).map_err(|e| archive_err(dir, e))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(archive_err(dir, format!("unsupported schema version {}", m.schema_version)));
    }
    let reader = BufReader::new(fs::File::open(dir.join("steps.jsonl"))?);
    let mut steps = Vec::with_capacity(m.length);
    for (t, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(&line).map_err(|e| archive_err(dir, format!("line {}: {e}", t + 1)))?;
        if rec.t != t {
            return Err(archive_err(dir, format!("step {t} out of order")));
        }
        let (image, size) = read_png(&dir.join("frames").join(format!("{t:06}.png")))?;
        if size != m.image_size {
            return Err(archive_err(dir, format!("frame {t} is {size}px, manifest says {}", m.image_size)));
        }
        steps.push(Step {
            observation: Observation { image, size, frame_index: rec.frame_index },
            action: rec.action,
            theta: rec.theta,
            pose: rec.pose,
        });
    }
    if steps.len() != m.length {
        return Err(archive_err(dir, format!("manifest length {} but {} steps", m.length, steps.len())));
    }
    let traj = Trajectory { scene_id: m.scene_id, source_tag: m.source_tag, steps, intervention_frame: m.intervention_frame };
    traj.validate()?;
    Ok(traj)
}

/// Writes every trajectory plus the index. Returns the trajectory paths.
pub fn save_database(dir: &Path, db: &Database) -> Result<Vec<PathBuf>, DatasetError> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(db.len());
    let mut counts: Vec<(String, usize)> = Vec::new();
    for traj in &db.trajectories {
        let k = match counts.iter_mut().find(|(s, _)| *s == traj.scene_id) {
            Some((_, c)) => {
                *c += 1;
                *c - 1
            }
            None => {
                counts.push((traj.scene_id.clone(), 1));
                0
            }
        };
        let name = trajectory_dir_name(&traj.scene_id, k);
        save_trajectory(&dir.join(&name), traj)?;
        names.push(name);
    }
    write_index(dir, &db.name, db.domain_tag, &names)?;
    Ok(names.iter().map(|n| dir.join(n)).collect())
}

pub fn write_index(dir: &Path, name: &str, domain_tag: DomainTag, trajectories: &[String]) -> Result<(), DatasetError> {
    let manifest = DatabaseManifest {
        schema_version: SCHEMA_VERSION,
        name: name.to_string(),
        domain_tag,
        trajectories: trajectories.to_vec(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

pub fn load_database(dir: &Path) -> Result<Database, DatasetError> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| archive_err(dir, e))?;
    let m: DatabaseManifest = serde_json::from_str(&text).map_err(|e| archive_err(dir, e))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(archive_err(dir, format!("unsupported schema version {}", m.schema_version)));
    }
    let trajectories = m.trajectories.iter().map(|p| load_trajectory(&dir.join(p))).collect::<Result<Vec<_>, _>>()?;
    Ok(Database { name: m.name, domain_tag: m.domain_tag, trajectories })
}
