//! Binary checkpoints.
//!
//! Little-endian layout: magic `NQSCKPT1`, version `u32`, the network
//! configuration, lattice extents, sign-prior flag, `R` and `θ`, the RNG state
//! `(seed, counter)`, the step counter, the persisted chain configurations, a
//! provenance string, and a trailing FNV-1a 64-bit checksum of everything
//! before it.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use super::DriverError;
use crate::lattice::{Configuration, SiteMode};
use crate::network::{Architecture, NetworkConfig, ParameterVector};

pub const MAGIC: &[u8; 8] = b"NQSCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub lx: usize,
    pub ly: usize,
    pub sign_prior: bool,
    pub theta: ParameterVector,
    pub rng_seed: u64,
    pub rng_counter: u64,
    pub step: u64,
    /// Chain states, possibly empty; t-J holes are stored as 0.
    pub chains: Vec<Configuration>,
    pub provenance: String,
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
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DriverError> {
        if self.buf.len() - self.pos < n {
            return Err(DriverError::Checkpoint("truncated file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, DriverError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, DriverError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, DriverError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize, DriverError> {
        usize::try_from(self.u64()?).map_err(|_| DriverError::Checkpoint("length overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64, DriverError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let n = &self.network;
        w.u8(match n.arch {
            Architecture::Cnn1 => 1,
            Architecture::Cnn2 => 2,
        });
        w.usize(n.n_blocks);
        w.usize(n.channels);
        w.usize(n.conv_kernel[0]);
        w.usize(n.conv_kernel[1]);
        w.usize(n.pool_kernel);
        w.usize(n.embedding_dim);
        w.usize(n.head_kernel[0]);
        w.usize(n.head_kernel[1]);
        w.u64(n.seed);
        w.f64(n.kernel_scale);
        w.f64(n.bias_init);
        w.f64(n.embedding_scale);
        w.usize(self.lx);
        w.usize(self.ly);
        w.u8(u8::from(self.sign_prior));
        w.usize(self.theta.len());
        for &t in self.theta.as_slice() {
            w.f64(t);
        }
        w.u64(self.rng_seed);
        w.u64(self.rng_counter);
        w.u64(self.step);
        let n_sites = self.chains.first().map_or(0, |c| c.len());
        w.usize(self.chains.len());
        w.usize(n_sites);
        w.u8(match self.chains.first().map(|c| c.mode()) {
            Some(SiteMode::TJ) => 1,
            _ => 0,
        });
        for c in &self.chains {
            w.0.extend(c.values().iter().map(|&v| v as u8));
        }
        w.usize(self.provenance.len());
        w.0.extend_from_slice(self.provenance.as_bytes());
        let sum = checksum(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DriverError> {
        let bad = |m: &str| DriverError::Checkpoint(m.to_string());
        if buf.len() < MAGIC.len() + 12 || &buf[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if checksum(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(DriverError::Checkpoint(format!("unsupported version {version}")));
        }
        let arch = match r.u8()? {
            1 => Architecture::Cnn1,
            2 => Architecture::Cnn2,
            _ => return Err(bad("unknown architecture tag")),
        };
        let network = NetworkConfig {
            arch,
            n_blocks: r.usize()?,
            channels: r.usize()?,
            conv_kernel: [r.usize()?, r.usize()?],
            pool_kernel: r.usize()?,
            embedding_dim: r.usize()?,
            head_kernel: [r.usize()?, r.usize()?],
            seed: r.u64()?,
            kernel_scale: r.f64()?,
            bias_init: r.f64()?,
            embedding_scale: r.f64()?,
        };
        let lx = r.usize()?;
        let ly = r.usize()?;
        let sign_prior = r.u8()? != 0;
        let n_params = r.usize()?;
        if n_params > body.len() / 8 {
            return Err(bad("parameter count exceeds the file size"));
        }
        let theta = (0..n_params).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let rng_seed = r.u64()?;
        let rng_counter = r.u64()?;
        let step = r.u64()?;
        let n_chains = r.usize()?;
        let n_sites = r.usize()?;
        let mode = if r.u8()? == 1 { SiteMode::TJ } else { SiteMode::Spin };
        let bytes = r.take(
            n_chains
                .checked_mul(n_sites)
                .ok_or_else(|| bad("chain block overflows"))?,
        )?;
        let chains = bytes
            .chunks(n_sites.max(1))
            .take(n_chains)
            .map(|c| {
                Configuration::new(c.iter().map(|&b| b as i8).collect(), mode)
                    .map_err(|e| DriverError::Checkpoint(format!("bad chain state: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let len = r.usize()?;
        let provenance = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("provenance is not UTF-8"))?;
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            network,
            lx,
            ly,
            sign_prior,
            theta: ParameterVector::new(theta),
            rng_seed,
            rng_counter,
            step,
            chains,
            provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DriverError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| DriverError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| DriverError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DriverError> {
        let bytes = std::fs::read(path).map_err(|e| DriverError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable summary.
    pub fn describe(&self) -> String {
        let n = &self.network;
        format!(
            "format = {}/v{VERSION}\narch = {:?}\nn_blocks = {}\nchannels = {}\nconv_kernel = {:?}\n\
             pool_kernel = {}\nembedding_dim = {}\nhead_kernel = {:?}\nlattice = {}x{}\nsign_prior = {}\n\
             n_params = {}\ntheta_norm = {:.12e}\nrng_seed = {}\nrng_counter = {}\nstep = {}\nchains = {}\n\
             provenance = {:?}",
            String::from_utf8_lossy(MAGIC),
            n.arch,
            n.n_blocks,
            n.channels,
            n.conv_kernel,
            n.pool_kernel,
            n.embedding_dim,
            n.head_kernel,
            self.lx,
            self.ly,
            self.sign_prior,
            self.theta.len(),
            self.theta.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt(),
            self.rng_seed,
            self.rng_counter,
            self.step,
            self.chains.len(),
            self.provenance
        )
    }
}
