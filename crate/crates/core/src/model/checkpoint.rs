//! Checkpoint files: magic `BMC1`, a length-prefixed `key=value` config
//! block, the named parameter tensors in declaration order, then optional
//! Adam moments.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::optim::Adam;
use crate::tensor::{read_tensor, read_u32, write_tensor};
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BMC1";

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub model: ModelState<F>,
    pub optimizer: Option<Adam<F>>,
    /// Input resolution the model was trained on, if known.
    pub lr_size: Option<(usize, usize)>,
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut kv = self.model.config.to_kv();
        kv.set("iteration", self.model.iteration);
        kv.set("dtype", F::NAME);
        kv.set("tensors", self.model.params.len());
        if let Some((w, h)) = self.lr_size {
            kv.set("lr_width", w);
            kv.set("lr_height", h);
        }
        write_block(&mut out, kv.render().as_bytes());
        for (_, name, p) in self.model.params.iter() {
            write_block(&mut out, name.as_bytes());
            write_tensor(&mut out, &p.value)?;
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step.to_le_bytes());
                for t in adam.m.iter().chain(&adam.v) {
                    write_tensor(&mut out, t)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut input = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let kv = KeyValues::parse(&read_string(&mut input)?)?;
        let dtype: String = kv.require("dtype")?;
        if dtype != F::NAME {
            return Err(Error::Format(format!(
                "checkpoint holds {dtype} tensors, expected {}",
                F::NAME
            )));
        }
        let config = ModelConfig::from_kv(&kv)?;
        let mut model = ModelState::<F>::new(config)?;
        model.iteration = kv.require("iteration")?;
        let count: usize = kv.require("tensors")?;
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, config declares {}",
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = read_string(&mut input)?;
            let expected = model.params.name(id).to_string();
            if name != expected {
                return Err(Error::Format(format!("expected tensor `{expected}`, found `{name}`")));
            }
            let t = read_tensor::<F, _>(&mut input)?;
            let slot = &mut model.params.get_mut(id).value;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        let optimizer = match flag[0] {
            0 => None,
            1 => {
                let mut step = [0u8; 8];
                input.read_exact(&mut step)?;
                let n = model.params.len();
                let mut moments = (0..2 * n)
                    .map(|_| read_tensor::<F, _>(&mut input))
                    .collect::<Result<Vec<_>>>()?;
                let v = moments.split_off(n);
                let adam = Adam {
                    step: u64::from_le_bytes(step),
                    m: moments,
                    v,
                };
                if !adam.matches(&model.params) {
                    return Err(Error::Format("optimizer moments do not match parameters".into()));
                }
                Some(adam)
            }
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        if (input.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let lr_size = match (kv.get::<usize>("lr_width")?, kv.get::<usize>("lr_height")?) {
            (Some(w), Some(h)) => Some((w, h)),
            _ => None,
        };
        Ok(Self {
            model,
            optimizer,
            lr_size,
        })
    }
}

pub fn save_checkpoint<F: Real>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn write_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn read_string<R: Read>(input: &mut R) -> Result<String> {
    let len = read_u32(input)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("implausible block length {len}")));
    }
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("block is not UTF-8".into()))
}
