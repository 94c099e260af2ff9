use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, TrainConfig};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::numerics::Tensor;
use crate::schedule::{from_alphas, NoiseSchedule, ScheduleFamily};

pub const MAGIC: &[u8; 7] = b"IRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Spatial extents a model was trained at; `condition` is `None` for
/// unconditional models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub condition: Option<(usize, usize)>,
    pub output: (usize, usize),
}

/// A trained model with everything needed to sample from it.
///
/// Layout (little-endian): magic, `u32` version, length-prefixed JSON for the
/// denoiser config, train config and resolution, `u64` step, the schedule as
/// family JSON plus `u32` T and T raw `f64` alphas, then `u32` parameter count
/// and per parameter its name, `u8` rank, `u32` dims and raw `f32` values.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenoiserModel<f32>,
    pub schedule: NoiseSchedule,
    pub train: TrainConfig,
    pub resolution: Resolution,
    pub step: u64,
}

fn corrupt(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Checkpoint(e.to_string())
}

fn write_json<W: Write, S: Serialize>(w: &mut W, value: &S) -> std::io::Result<()> {
    let bytes = serde_json::to_vec(value).expect("checkpoint metadata serializes");
    w.write_u32::<LE>(bytes.len() as u32)?;
    w.write_all(&bytes)
}

fn read_json<R: Read, D: for<'de> Deserialize<'de>>(r: &mut R, what: &str) -> Result<D> {
    let len = r.read_u32::<LE>().map_err(corrupt)? as usize;
    if len > 1 << 24 {
        return Err(corrupt(format!("{what} metadata length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(corrupt)?;
    serde_json::from_slice(&buf).map_err(|e| corrupt(format!("{what}: {e}")))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.write_inner(&mut w).map_err(corrupt)
    }

    fn write_inner<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        write_json(w, self.model.config())?;
        write_json(w, &self.train)?;
        write_json(w, &self.resolution)?;
        w.write_u64::<LE>(self.step)?;
        write_json(w, &self.schedule.family())?;
        w.write_u32::<LE>(self.schedule.steps() as u32)?;
        for &a in self.schedule.alphas() {
            w.write_f64::<LE>(a)?;
        }
        let params = self.model.params();
        w.write_u32::<LE>(params.len() as u32)?;
        for (name, p) in self.model.names().zip(params) {
            w.write_u16::<LE>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(p.rank() as u8)?;
            for &d in p.shape() {
                w.write_u32::<LE>(d as u32)?;
            }
            for &v in p.data() {
                w.write_f32::<LE>(v)?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|_| corrupt("file is too short for a checkpoint header"))?;
        if &magic != MAGIC {
            return Err(corrupt(format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&magic), "IRCKPT1")));
        }
        let version = r.read_u32::<LE>().map_err(corrupt)?;
        if version != FORMAT_VERSION {
            return Err(PipelineError::Version { found: version, expected: FORMAT_VERSION });
        }
        let config: DenoiserConfig = read_json(&mut r, "denoiser config")?;
        let train: TrainConfig = read_json(&mut r, "train config")?;
        let resolution: Resolution = read_json(&mut r, "resolution")?;
        let step = r.read_u64::<LE>().map_err(corrupt)?;
        let family: ScheduleFamily = read_json(&mut r, "schedule family")?;
        let t = r.read_u32::<LE>().map_err(corrupt)? as usize;
        let alphas = (0..t).map(|_| r.read_f64::<LE>()).collect::<std::io::Result<Vec<_>>>().map_err(corrupt)?;
        let schedule = from_alphas(family, alphas)?;
        let shapes = config.parameter_shapes()?;
        let count = r.read_u32::<LE>().map_err(corrupt)? as usize;
        if count != shapes.len() {
            return Err(corrupt(format!("{count} parameter tensors stored, config expects {}", shapes.len())));
        }
        let mut params = Vec::with_capacity(count);
        for (expected_name, expected_shape) in &shapes {
            let len = r.read_u16::<LE>().map_err(corrupt)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(corrupt)?;
            let name = String::from_utf8(name).map_err(corrupt)?;
            if &name != expected_name {
                return Err(corrupt(format!("parameter `{name}` found where `{expected_name}` was expected")));
            }
            let rank = r.read_u8().map_err(corrupt)? as usize;
            let shape = (0..rank).map(|_| r.read_u32::<LE>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>().map_err(corrupt)?;
            if &shape != expected_shape {
                return Err(corrupt(format!("`{name}` has shape {shape:?}, expected {expected_shape:?}")));
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LE>(&mut data).map_err(corrupt)?;
            params.push(Tensor::new(&shape, data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(corrupt)? != 0 {
            return Err(corrupt("trailing bytes after the last parameter"));
        }
        let model = DenoiserModel::from_parts(config, params)?;
        Ok(Checkpoint { model, schedule, train, resolution, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| PipelineError::io(&tmp, e))?;
        self.write_to(std::io::BufWriter::new(file))?;
        std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| PipelineError::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|e| match e {
            PipelineError::Checkpoint(msg) => PipelineError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
