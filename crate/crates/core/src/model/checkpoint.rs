//! Binary checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "FCST" | version u32
//! config: mode u8 | N u32 | num_classes u32 | scale num u32 | scale den u32 | width u32 | height u32
//! count u32 | records...                      (parameters, then BN running mean/var)
//! t u64 | lr f64 | beta1 f64 | beta2 f64 | eps f64
//! count u32 | records...                      (m.*, then v.*)
//! crc32 u32                                   (over every preceding byte)
//! ```
//!
//! A record is `name_len u32 | name | dtype u8 (1 = f64) | rank u32 | dims u64… | payload`.

use std::fs;
use std::path::Path;

use super::{ChannelScale, FrameMode, ModelConfig, ModelParams};
use crate::error::{bail, Result};
use crate::optim::AdamState;
use crate::tensor::layers::BatchNormState;
use crate::tensor::{BatchStats, Tensor};

const MAGIC: &[u8; 4] = b"FCST";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: AdamState,
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
    fn record(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u8(DTYPE_F64);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for &v in data {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
    fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| crate::Error::Format("record name is not UTF-8".into()))?;
        if self.u8()? != DTYPE_F64 {
            bail!(Format, "record {name}: unsupported dtype");
        }
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = match n {
            Some(n)
                if n.checked_mul(8)
                    .is_some_and(|b| b <= self.buf.len() - self.pos) =>
            {
                n
            }
            _ => bail!(Format, "record {name}: payload {shape:?} exceeds file"),
        };
        let data = self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| crate::Error::Format(format!("record {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let p = &ckpt.params;
    let cfg = &p.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let (mode, classes) = match cfg.mode {
        FrameMode::Rgb => (0, 0),
        FrameMode::Semantic { num_classes } => (1, num_classes as u32),
    };
    w.u8(mode);
    w.u32(cfg.input_len as u32);
    w.u32(classes);
    w.u32(cfg.channel_scale.num);
    w.u32(cfg.channel_scale.den);
    w.u32(cfg.width as u32);
    w.u32(cfg.height as u32);

    let stats: Vec<(&str, &BatchStats)> = p
        .norms()
        .iter()
        .filter_map(|(n, s)| s.running.as_ref().map(|r| (n.as_str(), r)))
        .collect();
    w.u32((p.len() + 2 * stats.len()) as u32);
    for (name, t) in p.iter() {
        w.record(name, t.shape(), t.data());
    }
    for (name, s) in &stats {
        w.record(&format!("{name}.running_mean"), &[s.mean.len()], &s.mean);
        w.record(&format!("{name}.running_var"), &[s.var.len()], &s.var);
    }

    let o = &ckpt.optimizer;
    w.u64(o.t);
    w.f64(o.lr);
    w.f64(o.beta1);
    w.f64(o.beta2);
    w.f64(o.epsilon);
    w.u32((o.m.len() + o.v.len()) as u32);
    for (prefix, moments) in [("m", &o.m), ("v", &o.v)] {
        for ((name, _), t) in p.iter().zip(moments.iter()) {
            w.record(&format!("{prefix}.{name}"), t.shape(), t.data());
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        bail!(Format, "not a checkpoint (bad magic)");
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        bail!(Format, "checkpoint CRC mismatch");
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let mode = r.u8()?;
    let input_len = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let (num, den) = (r.u32()?, r.u32()?);
    let (width, height) = (r.u32()? as usize, r.u32()? as usize);
    let mode = match mode {
        0 => FrameMode::Rgb,
        1 => FrameMode::Semantic {
            num_classes: classes,
        },
        m => bail!(Format, "unknown frame mode tag {m}"),
    };
    let channel_scale =
        ChannelScale::new(num, den).map_err(|e| crate::Error::Format(e.to_string()))?;
    let config = ModelConfig {
        width,
        height,
        input_len,
        mode,
        channel_scale,
    };
    config
        .validate()
        .map_err(|e| crate::Error::Format(e.to_string()))?;

    let count = r.u32()? as usize;
    let mut params = Vec::new();
    let mut extra = Vec::new();
    for _ in 0..count {
        let (name, t) = r.record()?;
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            extra.push((name, t));
        } else {
            params.push((name, t));
        }
    }
    let mut norms = Vec::new();
    for name in super::params::norm_names(&config) {
        let find = |suffix: &str| {
            extra
                .iter()
                .find(|(n, _)| *n == format!("{name}.{suffix}"))
                .map(|(_, t)| t)
        };
        let running = match (find("running_mean"), find("running_var")) {
            (Some(m), Some(v)) => Some(BatchStats {
                mean: m.data().to_vec(),
                var: v.data().to_vec(),
            }),
            (None, None) => None,
            _ => bail!(Format, "batch-norm layer {name} has incomplete statistics"),
        };
        norms.push((
            name,
            BatchNormState {
                running,
                ..BatchNormState::default()
            },
        ));
    }
    if extra.len() != 2 * norms.iter().filter(|(_, s)| s.running.is_some()).count() {
        bail!(Format, "unexpected batch-norm statistic records");
    }
    let params = ModelParams::from_parts(config, params, norms)?;

    let t = r.u64()?;
    let (lr, beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let count = r.u32()? as usize;
    if count != 2 * params.len() {
        bail!(
            Format,
            "expected {} optimizer records, got {count}",
            2 * params.len()
        );
    }
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for i in 0..count {
        let (name, tensor) = r.record()?;
        let (prefix, slot) = if i < params.len() {
            ("m", &mut m)
        } else {
            ("v", &mut v)
        };
        let (pname, pt) = params.iter().nth(i % params.len()).unwrap();
        if name != format!("{prefix}.{pname}") || tensor.shape() != pt.shape() {
            bail!(
                Format,
                "optimizer record {name} does not match parameter {pname}"
            );
        }
        slot.push(tensor);
    }
    if r.pos != body.len() {
        bail!(
            Format,
            "{} trailing bytes in checkpoint",
            body.len() - r.pos
        );
    }
    Ok(Checkpoint {
        params,
        optimizer: AdamState {
            m,
            v,
            t,
            lr,
            beta1,
            beta2,
            epsilon,
        },
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            width: 6,
            height: 4,
            input_len: 3,
            mode: FrameMode::Semantic { num_classes: 3 },
            channel_scale: ChannelScale::new(1, 16).unwrap(),
        };
        let mut params = init_params(cfg, 11).unwrap();
        let name = params.norms()[1].0.clone();
        let width = params.get(&format!("{name}.gamma")).unwrap().numel();
        params
            .apply_batch_stats(&[(
                name,
                BatchStats {
                    mean: vec![0.25; width],
                    var: vec![1.5; width],
                },
            )])
            .unwrap();
        let mut optimizer = AdamState::new(params.iter().map(|(_, t)| t));
        optimizer.t = 17;
        optimizer.m[0].data_mut()[0] = -3.0;
        optimizer.v[2].data_mut()[0] = 0.125;
        Checkpoint { params, optimizer }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode_checkpoint(&sample());
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x10;
        assert!(
            matches!(decode_checkpoint(&flipped), Err(crate::Error::Format(m)) if m.contains("CRC"))
        );
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(
            matches!(decode_checkpoint(&magic), Err(crate::Error::Format(m)) if m.contains("magic"))
        );
        assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    }
}
