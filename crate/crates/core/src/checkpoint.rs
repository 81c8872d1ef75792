//! Binary checkpoints: a versioned header, the run configuration as TOML,
//! the self-adjusting regression statistics and every named parameter
//! tensor with its shape. All numbers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::SelfAdjustState;
use crate::model::Detector;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub beta_state: SelfAdjustState,
    pub detector: Detector,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8 in checkpoint: {e}")))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        write_str(w, &self.config.to_toml()?)?;
        w.write_u64::<LittleEndian>(self.iteration)?;
        let s = &self.beta_state;
        for v in s.running_mean.iter().chain(&s.running_var).chain([&s.momentum, &s.beta_hat]) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.write_u8(u8::from(s.shared_channels))?;
        let params = &self.detector.params;
        w.write_u32::<LittleEndian>(params.len() as u32)?;
        for (name, t) in params.iter() {
            write_str(w, name)?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint and rebuilds the detector it describes. Every
    /// stored tensor must match a parameter of that detector in name and
    /// shape, and every parameter must be present.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = RunConfig::from_toml(&read_str(r)?)?;
        let iteration = r.read_u64::<LittleEndian>()?;
        let mut f = [0f64; 10];
        r.read_f64_into::<LittleEndian>(&mut f)?;
        let shared_channels = r.read_u8()? != 0;
        let beta_state = SelfAdjustState {
            running_mean: [f[0], f[1], f[2], f[3]],
            running_var: [f[4], f[5], f[6], f[7]],
            momentum: f[8],
            beta_hat: f[9],
            shared_channels,
        };
        let mut detector = Detector::new(&config.model, config.train.mask_head_enabled, config.seed)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != detector.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, the configured model has {}",
                detector.params.len()
            )));
        }
        for _ in 0..count {
            let name = read_str(r)?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let mut data = vec![0f32; shape.iter().product()];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            let id = detector
                .params
                .id_of(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if detector.params.get(id).shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {shape:?}, expected {:?}",
                    detector.params.get(id).shape()
                )));
            }
            *detector.params.get_mut(id) = Tensor::new(shape, data)?;
        }
        Ok(Checkpoint {
            config,
            iteration,
            beta_state,
            detector,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
