//! Binary checkpoints: network description, parameters and optional
//! training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPLT" u32:version
//! str:arch u32:num_classes u8:normalize
//! u32:d f64×d:lambda0
//! u32:n str×n:feature_channels u32:m str×m:lattice_channels u32:gravity_axis
//! u32:layers { u32:layer u8:kind u32:tensors { u32:rank u32×rank:shape f32×len } }
//! u8:has_training [ u64:iteration u64:adam_step u8:has_best f64:best u32:stale
//!                   u32:moments { u64:len f64×len (first) f64×len (second) } ]
//! ```
//!
//! Strings are `u32` byte length followed by UTF-8. Parameter tensors are
//! stored as `f32`; values that do not survive that conversion are refused
//! rather than silently rounded (see [`Parameters::round_to_f32`]).
//! Optimizer moments are stored as `f64` so a resumed run continues exactly.

use std::path::Path;

use crate::bcl::FilterBank;
use crate::data::ChannelSelection;
use crate::error::{Error, Result};
use crate::lattice::LatticeConfig;
use crate::network::{parse_arch, LayerParams, NetworkSpec, Parameters};
use crate::train::{OptimizerState, TrainingState};

pub const MAGIC: &[u8; 4] = b"SPLT";
pub const VERSION: u32 = 1;

const KIND_CONV: u8 = 1;
const KIND_BCL: u8 = 2;
const KIND_BATCHNORM: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Parameters,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, params: Parameters) -> Self {
        Self {
            spec,
            params,
            training: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check(&self.spec)?;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(self.spec.arch());
        w.u32(self.spec.num_classes() as u32);
        w.u8(self.spec.normalizes() as u8);
        let scale = self.spec.lattice0().scale();
        w.u32(scale.len() as u32);
        scale.iter().for_each(|&v| w.f64(v));
        let ch = self.spec.channels();
        w.strings(&ch.features);
        w.strings(&ch.lattice);
        w.u32(ch.gravity_axis as u32);

        let layers = self.params.layers();
        let stored: Vec<usize> = (0..layers.len())
            .filter(|&i| !matches!(layers[i], LayerParams::None))
            .collect();
        w.u32(stored.len() as u32);
        for i in stored {
            w.u32(i as u32);
            match &layers[i] {
                LayerParams::Conv { weight, bias } => {
                    let c_out = bias.len();
                    w.u8(KIND_CONV);
                    w.u32(2);
                    w.tensor(&[weight.len() / c_out.max(1), c_out], weight)?;
                    w.tensor(&[c_out], bias)?;
                }
                LayerParams::Bcl(f) => {
                    w.u8(KIND_BCL);
                    w.u32(2);
                    w.tensor(&[f.taps(), f.c_in(), f.c_out()], f.weights())?;
                    w.tensor(&[f.c_out()], f.bias())?;
                }
                LayerParams::BatchNorm {
                    gain,
                    shift,
                    running_mean,
                    running_var,
                } => {
                    w.u8(KIND_BATCHNORM);
                    w.u32(4);
                    for t in [gain, shift, running_mean, running_var] {
                        w.tensor(&[t.len()], t)?;
                    }
                }
                LayerParams::None => unreachable!(),
            }
        }

        match &self.training {
            None => w.u8(0),
            Some(t) => {
                w.u8(1);
                w.u64(t.iteration);
                w.u64(t.optimizer.step);
                w.u8(t.best_validation.is_some() as u8);
                w.f64(t.best_validation.unwrap_or(0.0));
                w.u32(t.stale_validations);
                w.u32(t.optimizer.first.len() as u32);
                for (m, v) in t.optimizer.first.iter().zip(&t.optimizer.second) {
                    w.u64(m.len() as u64);
                    m.iter().for_each(|&x| w.f64(x));
                    v.iter().for_each(|&x| w.f64(x));
                }
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let arch = r.str()?;
        let num_classes = r.u32()? as usize;
        let normalize = r.u8()? != 0;
        let d = r.u32()? as usize;
        let scale = (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let lattice0 = LatticeConfig::new(scale)?;
        let features = r.strings()?;
        let lattice = r.strings()?;
        let mut channels = ChannelSelection::new(&features, &lattice);
        channels.gravity_axis = r.u32()? as usize;
        let spec = parse_arch(&arch, &lattice0, num_classes, &channels)?.with_normalization(normalize);

        let mut params = Parameters::zeros(&spec);
        let count = r.u32()? as usize;
        let expected = spec.layers().iter().filter(|l| l.is_parameterized()).count();
        if count != expected {
            return Err(Error::Checkpoint(format!(
                "{count} parameter layers stored, architecture has {expected}"
            )));
        }
        for _ in 0..count {
            let i = r.u32()? as usize;
            let kind = r.u8()?;
            let tensors = r.u32()? as usize;
            let mut read: Vec<(Vec<usize>, Vec<f64>)> = (0..tensors).map(|_| r.tensor()).collect::<Result<_>>()?;
            let slot = params
                .layers_mut()
                .get_mut(i)
                .ok_or_else(|| Error::Checkpoint(format!("layer index {i} out of range")))?;
            *slot = match (kind, tensors) {
                (KIND_CONV, 2) => {
                    let (_, bias) = read.pop().unwrap();
                    let (_, weight) = read.pop().unwrap();
                    LayerParams::Conv { weight, bias }
                }
                (KIND_BCL, 2) => {
                    let (_, bias) = read.pop().unwrap();
                    let (shape, weight) = read.pop().unwrap();
                    if shape.len() != 3 {
                        return Err(Error::Checkpoint(format!("BCL layer {i} weights have rank {}", shape.len())));
                    }
                    LayerParams::Bcl(FilterBank::from_parts(shape[0], shape[1], shape[2], weight, bias)?)
                }
                (KIND_BATCHNORM, 4) => {
                    let mut it = read.into_iter().map(|t| t.1);
                    LayerParams::BatchNorm {
                        gain: it.next().unwrap(),
                        shift: it.next().unwrap(),
                        running_mean: it.next().unwrap(),
                        running_var: it.next().unwrap(),
                    }
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "layer {i} has unknown kind {kind} with {tensors} tensors"
                    )))
                }
            };
        }
        params
            .check(&spec)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match architecture: {e}")))?;

        let training = match r.u8()? {
            0 => None,
            1 => {
                let iteration = r.u64()?;
                let step = r.u64()?;
                let has_best = r.u8()? != 0;
                let best = r.f64()?;
                let stale_validations = r.u32()?;
                let n = r.u32()? as usize;
                let mut first = Vec::with_capacity(n);
                let mut second = Vec::with_capacity(n);
                for _ in 0..n {
                    let len = r.u64()? as usize;
                    first.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                    second.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                }
                let optimizer = OptimizerState { step, first, second };
                optimizer
                    .check(&params)
                    .map_err(|e| Error::Checkpoint(format!("optimizer state: {e}")))?;
                Some(TrainingState {
                    iteration,
                    optimizer,
                    best_validation: has_best.then_some(best),
                    stale_validations,
                })
            }
            b => return Err(Error::Checkpoint(format!("bad training-state flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { spec, params, training })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn strings(&mut self, list: &[String]) {
        self.u32(list.len() as u32);
        list.iter().for_each(|s| self.str(s));
    }
    fn tensor(&mut self, shape: &[usize], data: &[f64]) -> Result<()> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.u32(shape.len() as u32);
        shape.iter().for_each(|&s| self.u32(s as u32));
        for &v in data {
            let f = v as f32;
            if f as f64 != v && !(v.is_nan() && f.is_nan()) {
                return Err(Error::Checkpoint(format!(
                    "parameter value {v:e} is not representable as f32; round parameters before saving"
                )));
            }
            self.0.extend_from_slice(&f.to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not valid UTF-8".into()))
    }
    fn strings(&mut self) -> Result<Vec<String>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.str()).collect()
    }
    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 3 {
            return Err(Error::Checkpoint(format!("tensor rank {rank} out of range")));
        }
        let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .filter(|&l| l <= (self.bytes.len() - self.pos) / 4)
            .ok_or_else(|| Error::Checkpoint("tensor larger than the file".into()))?;
        let raw = self.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((shape, data))
    }
}
