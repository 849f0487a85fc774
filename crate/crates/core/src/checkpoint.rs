//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "SVFAPCK\0"
//! major      u16       format major version (readers reject other majors)
//! minor      u16       format minor version (additive changes only)
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON
//! count      u64       number of tensors
//! count ×    name_len u32, name bytes (UTF-8), rows u64, cols u64,
//!            rows·cols f64 values in row-major order
//! ```
//!
//! Tensor names are namespaced: `param/<path>` for weights and
//! `adam_m/<path>`, `adam_v/<path>` for optimizer moments. The JSON holds
//! the config in its `key = value` text form, the objective, the step
//! counters, the decay exclusions, the dataset normalization and the RNG
//! position (seed, stream, word position).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ArchConfig, RunConfig, TrainConfig};
use crate::data::Normalization;
use crate::error::{Result, SvfapError};
use crate::params::ParamStore;
use crate::tape::Mat;
use crate::trainer::{AdamW, Objective, TrainState};

pub const MAGIC: &[u8; 8] = b"SVFAPCK\0";
pub const VERSION_MAJOR: u16 = 1;
pub const VERSION_MINOR: u16 = 0;

#[derive(Serialize, Deserialize)]
struct RngMeta {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: String,
    objective: String,
    step: u64,
    opt_t: u64,
    no_decay: Vec<String>,
    rng: RngMeta,
    normalization: Option<Normalization>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub objective: Objective,
    pub state: TrainState,
    pub normalization: Option<Normalization>,
}

fn objective_text(o: Objective) -> String {
    match o {
        Objective::Pretrain => "pretrain".into(),
        Objective::Classify { classes } => format!("classify:{classes}"),
        Objective::Regress { dims } => format!("regress:{dims}"),
    }
}

fn parse_objective(s: &str) -> Result<Objective> {
    let bad = || SvfapError::Checkpoint(format!("unknown objective {s:?}"));
    match s.split_once(':') {
        None if s == "pretrain" => Ok(Objective::Pretrain),
        Some(("classify", n)) => Ok(Objective::Classify {
            classes: n.parse().map_err(|_| bad())?,
        }),
        Some(("regress", n)) => Ok(Objective::Regress {
            dims: n.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, m: &Mat) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((m.nrows() as u64).to_le_bytes());
    buf.extend((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        buf.extend(v.to_le_bytes());
    }
}

fn corrupt(what: &str) -> SvfapError {
    SvfapError::Checkpoint(format!("truncated or corrupt checkpoint ({what})"))
}

fn read_exact<const N: usize>(r: &mut Cursor<&[u8]>, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| corrupt(what))?;
    Ok(b)
}

fn read_u64(r: &mut Cursor<&[u8]>, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r, what)?))
}

fn read_bytes(r: &mut Cursor<&[u8]>, n: u64, what: &str) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if n > remaining {
        return Err(corrupt(what));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b).map_err(|_| corrupt(what))?;
    Ok(b)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: RunConfig::new(self.arch.clone(), self.train.clone()).to_text(),
            objective: objective_text(self.objective),
            step: self.state.step,
            opt_t: self.state.opt.t,
            no_decay: self.state.opt.no_decay.iter().cloned().collect(),
            rng: RngMeta {
                seed: hex(&self.state.rng.get_seed()),
                stream: self.state.rng.get_stream(),
                word_pos: self.state.rng.get_word_pos().to_string(),
            },
            normalization: self.normalization,
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| SvfapError::Checkpoint(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend(MAGIC);
        buf.extend(VERSION_MAJOR.to_le_bytes());
        buf.extend(VERSION_MINOR.to_le_bytes());
        buf.extend((meta.len() as u64).to_le_bytes());
        buf.extend(&meta);
        let opt = &self.state.opt;
        let count = self.state.params.len() + opt.m.len() + opt.v.len();
        buf.extend((count as u64).to_le_bytes());
        for (name, m) in self.state.params.iter() {
            put_tensor(&mut buf, &format!("param/{name}"), m);
        }
        for (name, m) in &opt.m {
            put_tensor(&mut buf, &format!("adam_m/{name}"), m);
        }
        for (name, m) in &opt.v {
            put_tensor(&mut buf, &format!("adam_v/{name}"), m);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        if &read_exact::<8>(&mut r, "magic")? != MAGIC {
            return Err(SvfapError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let major = u16::from_le_bytes(read_exact::<2>(&mut r, "version")?);
        let _minor = u16::from_le_bytes(read_exact::<2>(&mut r, "version")?);
        if major != VERSION_MAJOR {
            return Err(SvfapError::Checkpoint(format!(
                "checkpoint format {major}.x is not readable by format {VERSION_MAJOR}.x"
            )));
        }
        let meta_len = read_u64(&mut r, "meta length")?;
        let meta: Meta = serde_json::from_slice(&read_bytes(&mut r, meta_len, "meta")?)
            .map_err(|e| SvfapError::Checkpoint(format!("metadata: {e}")))?;
        let count = read_u64(&mut r, "tensor count")?;
        let mut params = ParamStore::default();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(read_exact::<4>(&mut r, "name length")?);
            let name = String::from_utf8(read_bytes(&mut r, len as u64, "name")?)
                .map_err(|_| SvfapError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = read_u64(&mut r, "rows")?;
            let cols = read_u64(&mut r, "cols")?;
            let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| corrupt("shape"))?;
            let raw = read_bytes(&mut r, n, &name)?;
            let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let mat = Mat::from_shape_vec((rows as usize, cols as usize), data).map_err(|_| corrupt("shape"))?;
            match name.split_once('/') {
                Some(("param", p)) => {
                    params.insert(p, mat);
                }
                Some(("adam_m", p)) => {
                    m.insert(p.to_string(), mat);
                }
                Some(("adam_v", p)) => {
                    v.insert(p.to_string(), mat);
                }
                _ => return Err(SvfapError::Checkpoint(format!("unknown tensor namespace in {name:?}"))),
            }
        }
        if r.position() != bytes.len() as u64 {
            return Err(corrupt("trailing bytes"));
        }
        let cfg = RunConfig::from_text(&meta.config)?;
        let seed = unhex(&meta.rng.seed).ok_or_else(|| SvfapError::Checkpoint("bad rng seed".into()))?;
        let word_pos: u128 = meta
            .rng
            .word_pos
            .parse()
            .map_err(|_| SvfapError::Checkpoint("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng.stream);
        rng.set_word_pos(word_pos);
        Ok(Checkpoint {
            arch: cfg.arch,
            train: cfg.train,
            objective: parse_objective(&meta.objective)?,
            state: TrainState {
                params,
                opt: AdamW {
                    m,
                    v,
                    t: meta.opt_t,
                    no_decay: meta.no_decay.into_iter().collect(),
                },
                step: meta.step,
                rng,
            },
            normalization: meta.normalization,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| SvfapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SvfapError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
