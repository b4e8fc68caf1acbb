use std::path::Path;

use crate::envs::Reader;
use crate::error::{Error, FormatError, Result};
use crate::planners::{Differentiation, ModelParams, PlannerKind, PlannerSpec};
use crate::solvers::{SolverConfig, SolverKind};
use crate::tensor::Tensor;

use super::{RngState, TrainConfig};

const MAGIC: [u8; 4] = *b"IDPC";
const VERSION: u32 = 1;

/// Complete trainer state: enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    /// RMSprop squared-gradient averages.
    pub optimizer: ModelParams,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub rng: RngState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in 32 bits")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn solver(&mut self, c: &SolverConfig) -> Result<()> {
        self.u8(match c.kind {
            SolverKind::ForwardIteration => 0,
            SolverKind::Anderson => 1,
        });
        self.u32(c.max_iter)?;
        self.f64(c.tol);
        self.u32(c.memory)?;
        self.f64(c.beta);
        self.f64(c.ridge);
        Ok(())
    }

    fn tensors(&mut self, p: &ModelParams) -> Result<()> {
        self.u32(p.len())?;
        for (name, t) in p.iter() {
            self.u32(name.len())?;
            self.0.extend_from_slice(name.as_bytes());
            self.u32(t.rank())?;
            for &d in t.shape() {
                self.u32(d)?;
            }
            for &x in t.data() {
                self.f64(x);
            }
        }
        Ok(())
    }
}

fn read_solver(r: &mut Reader) -> Result<SolverConfig, FormatError> {
    let kind = match r.u8()? {
        0 => SolverKind::ForwardIteration,
        1 => SolverKind::Anderson,
        k => return Err(FormatError::Invalid(format!("solver kind {k}"))),
    };
    Ok(SolverConfig {
        kind,
        max_iter: r.u32()? as usize,
        tol: r.f64()?,
        memory: r.u32()? as usize,
        beta: r.f64()?,
        ridge: r.f64()?,
    })
}

fn read_tensors(r: &mut Reader) -> Result<ModelParams, FormatError> {
    let count = r.u32()? as usize;
    let mut p = ModelParams::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.bytes(len)?)
            .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| FormatError::Invalid(format!("tensor `{name}` is too large")))?;
        let bytes = r.bytes(numel.checked_mul(8).ok_or(FormatError::Truncated(r.pos))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| FormatError::Invalid(format!("tensor `{name}`: {e}")))?;
        p.insert(name, t);
    }
    Ok(p)
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&MAGIC);
        w.u32(VERSION as usize)?;
        let s = &self.config.planner;
        w.u8(match s.kind {
            PlannerKind::Vin => 0,
            PlannerKind::ConvGppn => 1,
        });
        w.u8(match s.differentiation {
            Differentiation::Implicit => 0,
            Differentiation::Explicit => 1,
        });
        w.u32(s.map_size)?;
        w.u32(s.channels)?;
        w.u32(s.kernel)?;
        w.u32(s.latent)?;
        w.u8(s.mapper_nonlinearity as u8);
        w.solver(&s.forward)?;
        w.u32(s.k_layer)?;
        w.solver(&s.backward)?;

        let c = &self.config;
        w.u32(c.epochs)?;
        w.u32(c.batch_size)?;
        w.f64(c.lr);
        w.f64(c.rmsprop_alpha);
        w.f64(c.rmsprop_eps);
        w.u64(c.seed);
        w.u32(c.eval.horizon_factor)?;
        w.u32(c.eval.full_start_limit)?;
        w.u32(c.eval.sampled_starts)?;
        w.u64(c.eval.seed);

        w.u32(self.epoch)?;
        w.f64(self.best_val);
        w.u32(self.best_epoch)?;
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        w.tensors(&self.params)?;
        w.tensors(&self.optimizer)?;
        Ok(w.0)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        let magic = r.array4()?;
        if magic != MAGIC {
            return Err(FormatError::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::Version(version));
        }
        let kind = match r.u8()? {
            0 => PlannerKind::Vin,
            1 => PlannerKind::ConvGppn,
            k => return Err(FormatError::Invalid(format!("planner kind {k}"))),
        };
        let differentiation = match r.u8()? {
            0 => Differentiation::Implicit,
            1 => Differentiation::Explicit,
            k => return Err(FormatError::Invalid(format!("differentiation mode {k}"))),
        };
        let planner = PlannerSpec {
            kind,
            differentiation,
            map_size: r.u32()? as usize,
            channels: r.u32()? as usize,
            kernel: r.u32()? as usize,
            latent: r.u32()? as usize,
            mapper_nonlinearity: r.u8()? != 0,
            forward: read_solver(&mut r)?,
            k_layer: r.u32()? as usize,
            backward: read_solver(&mut r)?,
        };
        let epochs = r.u32()? as usize;
        let batch_size = r.u32()? as usize;
        let lr = r.f64()?;
        let rmsprop_alpha = r.f64()?;
        let rmsprop_eps = r.f64()?;
        let seed = r.u64()?;
        let eval = super::EvalConfig {
            horizon_factor: r.u32()? as usize,
            full_start_limit: r.u32()? as usize,
            sampled_starts: r.u32()? as usize,
            seed: r.u64()?,
        };
        let epoch = r.u32()? as usize;
        let best_val = r.f64()?;
        let best_epoch = r.u32()? as usize;
        let rng = RngState {
            seed: r.bytes(32)?.try_into().expect("32 bytes"),
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.bytes(16)?.try_into().expect("16 bytes")),
        };
        let params = read_tensors(&mut r)?;
        let optimizer = read_tensors(&mut r)?;
        if !r.at_end() {
            return Err(FormatError::Invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config: TrainConfig {
                epochs,
                batch_size,
                lr,
                rmsprop_alpha,
                rmsprop_eps,
                seed,
                planner,
                eval,
            },
            params,
            optimizer,
            epoch,
            best_val,
            best_epoch,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|kind| Error::Format {
            path: path.to_path_buf(),
            kind,
        })
    }
}
