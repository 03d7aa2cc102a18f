//! Demonstration generation and the on-disk trajectory format.
//!
//! A dataset directory holds `manifest.json` and one `traj_NNNNN.bin` per
//! trajectory: magic `FBI1`, five little-endian `u32` (`T, N_s, N_p, N_k,
//! d_a`), then little-endian `f32` blocks for states, clouds, tactile,
//! flows and actions, then the goal cloud as a `u32` count and `n x 3` floats.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{expert_rollout, Task, ToyConfig, N_JOINTS};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::par;
use crate::perception::TactileMode;
use crate::rng;

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FBI1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub task: Task,
    pub n_traj: usize,
    #[serde(rename = "N_s")]
    pub n_s: usize,
    #[serde(rename = "N_p")]
    pub n_p: usize,
    #[serde(rename = "N_k")]
    pub n_k: usize,
    pub d_a: usize,
    pub seed: u64,
    #[serde(default = "binary_mode")]
    pub tactile_mode: TactileMode,
}

fn binary_mode() -> TactileMode {
    TactileMode::Binary
}

/// One demonstration with every array already widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<[f64; N_JOINTS]>,
    pub clouds: Vec<Vec<Point>>,
    pub tactile: Vec<Vec<f64>>,
    /// `flows[t]` maps `clouds[t-1]` onto `clouds[t]`; zero at `t = 0`.
    pub flows: Vec<Vec<Point>>,
    pub actions: Vec<[f64; N_JOINTS]>,
    pub goal_cloud: Vec<Point>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Rounds every value through `f32`, matching what the file stores.
    fn quantized(mut self) -> Self {
        let q = |v: &mut f64| *v = f64::from(*v as f32);
        self.states.iter_mut().flatten().for_each(q);
        self.clouds.iter_mut().flatten().flatten().for_each(q);
        self.tactile.iter_mut().flatten().for_each(q);
        self.flows.iter_mut().flatten().flatten().for_each(q);
        self.actions.iter_mut().flatten().for_each(q);
        self.goal_cloud.iter_mut().flatten().for_each(q);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
}

/// Rolls the expert until `n_trajectories` successes, in attempt order,
/// recording binary contacts.
pub fn generate_demos(cfg: &ToyConfig, task: Task, n_trajectories: usize, seed: u64) -> Result<TrajectoryDataset> {
    generate_demos_with_mode(cfg, task, n_trajectories, seed, TactileMode::Binary)
}

pub fn generate_demos_with_mode(
    cfg: &ToyConfig,
    task: Task,
    n_trajectories: usize,
    seed: u64,
    mode: TactileMode,
) -> Result<TrajectoryDataset> {
    if n_trajectories == 0 {
        return Err(Error::InvalidArgument("need at least one trajectory".into()));
    }
    cfg.validate()?;
    let mut kept = Vec::with_capacity(n_trajectories);
    let mut attempts = 0usize;
    while kept.len() < n_trajectories {
        let chunk = (n_trajectories - kept.len()).max(8);
        let base = attempts;
        let results = par::map_indexed(chunk, |i| {
            let ep_seed = rng::derive_seed(seed, &[0xDE70, (base + i) as u64]);
            expert_rollout(cfg, task, ep_seed, true)
        });
        for r in results {
            attempts += 1;
            let r = r?;
            if r.success && kept.len() < n_trajectories {
                kept.push(to_trajectory(r.records, mode));
            }
        }
        if attempts >= 16 && (kept.len() as f64) < 0.5 * attempts as f64 {
            return Err(Error::EnvMisconfigured(format!(
                "expert succeeded in {} of {attempts} attempts",
                kept.len()
            )));
        }
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        task,
        n_traj: kept.len(),
        n_s: N_JOINTS,
        n_p: cfg.n_points,
        n_k: cfg.n_keypoints(),
        d_a: N_JOINTS,
        seed,
        tactile_mode: mode,
    };
    Ok(TrajectoryDataset { manifest, trajectories: kept })
}

fn to_trajectory(records: Vec<(super::Observation, [f64; N_JOINTS])>, mode: TactileMode) -> Trajectory {
    let goal_cloud = records.first().map(|(o, _)| o.goal_cloud.clone()).unwrap_or_default();
    let mut t = Trajectory {
        states: Vec::new(),
        clouds: Vec::new(),
        tactile: Vec::new(),
        flows: Vec::new(),
        actions: Vec::new(),
        goal_cloud,
    };
    for (obs, action) in records {
        t.states.push(obs.s_cur);
        t.clouds.push(obs.p_cur);
        t.tactile.push(match mode {
            TactileMode::Binary => obs.r_gt.iter().map(|&c| f64::from(u8::from(c))).collect(),
            TactileMode::Continuous => obs.forces,
        });
        t.flows.push(obs.flow);
        t.actions.push(action);
    }
    t.quantized()
}

fn put_f32s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f64>) {
    for v in vals {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn trajectory_bytes(t: &Trajectory, m: &DatasetManifest) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [t.len(), m.n_s, m.n_p, m.n_k, m.d_a] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    put_f32s(&mut out, t.states.iter().flatten());
    put_f32s(&mut out, t.clouds.iter().flatten().flatten());
    put_f32s(&mut out, t.tactile.iter().flatten());
    put_f32s(&mut out, t.flows.iter().flatten().flatten());
    put_f32s(&mut out, t.actions.iter().flatten());
    out.extend_from_slice(&(t.goal_cloud.len() as u32).to_le_bytes());
    put_f32s(&mut out, t.goal_cloud.iter().flatten());
    out
}

fn traj_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("traj_{i:05}.bin"))
}

pub fn write_dataset(ds: &TrajectoryDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = serde_json::to_string_pretty(&ds.manifest)?;
    manifest.push('\n');
    fs::write(dir.join("manifest.json"), manifest)?;
    for (i, t) in ds.trajectories.iter().enumerate() {
        let mut f = fs::File::create(traj_path(dir, i))?;
        f.write_all(&trajectory_bytes(t, &ds.manifest))?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format { path: self.path.to_path_buf(), reason: "unexpected end of file".into() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect())
    }

    fn points(&mut self, n: usize) -> Result<Vec<Point>> {
        Ok(self.f32s(3 * n)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

pub fn read_trajectory(path: &Path, m: &DatasetManifest) -> Result<Trajectory> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut c = Cursor { buf: &buf, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(bad("missing FBI1 magic".into()));
    }
    let t = c.u32()?;
    let dims = [c.u32()?, c.u32()?, c.u32()?, c.u32()?];
    if dims != [m.n_s, m.n_p, m.n_k, m.d_a] || m.n_s != N_JOINTS || m.d_a != N_JOINTS {
        return Err(bad(format!("header dims {dims:?} disagree with the manifest")));
    }
    let states = c.f32s(t * N_JOINTS)?.chunks_exact(N_JOINTS).map(|s| [s[0], s[1], s[2], s[3]]).collect();
    let clouds = (0..t).map(|_| c.points(m.n_p)).collect::<Result<_>>()?;
    let tactile = (0..t).map(|_| c.f32s(m.n_k)).collect::<Result<_>>()?;
    let flows = (0..t).map(|_| c.points(m.n_p)).collect::<Result<_>>()?;
    let actions = c.f32s(t * N_JOINTS)?.chunks_exact(N_JOINTS).map(|s| [s[0], s[1], s[2], s[3]]).collect();
    let n_goal = c.u32()?;
    let goal_cloud = c.points(n_goal)?;
    if c.pos != buf.len() {
        return Err(bad("trailing bytes".into()));
    }
    Ok(Trajectory { states, clouds, tactile, flows, actions, goal_cloud })
}

pub fn read_dataset(dir: &Path) -> Result<TrajectoryDataset> {
    let path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Format { path, reason: format!("unsupported version {}", manifest.version) });
    }
    let trajectories = (0..manifest.n_traj)
        .map(|i| read_trajectory(&traj_path(dir, i), &manifest))
        .collect::<Result<_>>()?;
    Ok(TrajectoryDataset { manifest, trajectories })
}
