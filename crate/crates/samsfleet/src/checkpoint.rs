//! Binary agent checkpoints.
//!
//! All integers and floats are little-endian. Strings are a `u32` byte length
//! followed by UTF-8.
//!
//! ```text
//! magic        8 bytes  "SAMSCKPT"
//! version      u32      1
//! episode      u64      training episodes completed
//! seed         u64      training seed; with `episode` it fixes every later random stream
//! omega sigma  f64 f64  reward weights
//! net          u32 n_zones, u32 feature_width, u32 fleet_size, u32 hidden,
//!              u32 gcn_layers, f64 tau, f64 conc_eps
//! state        u32 q, u32 forecast_horizon (u32::MAX when absent)
//! sections     u32 count (2), then per section:
//!   name       string   "actor" | "critic"
//!   adam       f64 lr, f64 beta1, f64 beta2, f64 eps, u64 t
//!   tensors    u32 count, then per tensor:
//!     name     string
//!     shape    u32 rows, u32 cols
//!     value    rows*cols f64
//!     m        rows*cols f64
//!     v        rows*cols f64
//! ```

use std::fs;
use std::path::Path;

use samsfleet_core::a2c::{ActorNet, Agent, CriticNet, NetConfig};
use samsfleet_core::diffnet::{Adam, ParamStore, Tensor2};
use samsfleet_core::mdp::{RewardWeights, StateConfig};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SAMSCKPT";
pub const VERSION: u32 = 1;
const NO_FORECAST: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub episode: u64,
    pub seed: u64,
    pub weights: RewardWeights,
    pub net: NetConfig,
    pub state: StateConfig,
    pub actor: (ParamStore, Adam),
    pub critic: (ParamStore, Adam),
}

impl Checkpoint {
    pub fn from_agent(agent: &Agent, seed: u64) -> Self {
        Checkpoint {
            episode: agent.episode,
            seed,
            weights: agent.weights,
            net: agent.actor.cfg,
            state: agent.state,
            actor: (agent.actor.store.clone(), agent.actor_opt.clone()),
            critic: (agent.critic.store.clone(), agent.critic_opt.clone()),
        }
    }

    /// Rebuild the agent; the learning curve starts empty.
    pub fn into_agent(self) -> Result<Agent> {
        let mut actor = ActorNet::new(self.net, 0)?;
        let mut critic = CriticNet::new(self.net, 0)?;
        install(&mut actor.store, self.actor.0, "actor")?;
        install(&mut critic.store, self.critic.0, "critic")?;
        Ok(Agent {
            actor,
            critic,
            actor_opt: self.actor.1,
            critic_opt: self.critic.1,
            state: self.state,
            weights: self.weights,
            episode: self.episode,
            curve: Vec::new(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(self.episode);
        w.u64(self.seed);
        w.f64(self.weights.omega);
        w.f64(self.weights.sigma);
        let n = &self.net;
        for v in [n.n_zones, n.feature_width, n.fleet_size, n.hidden, n.gcn_layers] {
            w.u32(v as u32);
        }
        w.f64(n.tau);
        w.f64(n.conc_eps);
        w.u32(self.state.q as u32);
        w.u32(self.state.forecast_horizon.map_or(NO_FORECAST, |h| h as u32));
        w.u32(2);
        for (name, (store, opt)) in [("actor", &self.actor), ("critic", &self.critic)] {
            w.str(name);
            for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
                w.f64(v);
            }
            w.u64(opt.t);
            w.u32(store.len() as u32);
            for k in 0..store.len() {
                let t = &store.values[k];
                w.str(&store.names[k]);
                w.u32(t.rows as u32);
                w.u32(t.cols as u32);
                for src in [&t.data, &opt.m[k].data, &opt.v[k].data] {
                    src.iter().for_each(|&x| w.f64(x));
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("checkpoint version {version} is not {VERSION}")));
        }
        let episode = r.u64()?;
        let seed = r.u64()?;
        let weights = RewardWeights { omega: r.f64()?, sigma: r.f64()? };
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let net = NetConfig {
            n_zones: dims[0],
            feature_width: dims[1],
            fleet_size: dims[2],
            hidden: dims[3],
            gcn_layers: dims[4],
            tau: r.f64()?,
            conc_eps: r.f64()?,
        };
        let q = r.u32()? as usize;
        let forecast_horizon = match r.u32()? {
            NO_FORECAST => None,
            h => Some(h as usize),
        };
        if r.u32()? != 2 {
            return Err(Error::Data("checkpoint must hold exactly two sections".into()));
        }
        let actor = read_section(&mut r, "actor")?;
        let critic = read_section(&mut r, "critic")?;
        if r.at != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
        }
        Ok(Checkpoint { episode, seed, weights, net, state: StateConfig { q, forecast_horizon }, actor, critic })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(Error::io(path))?)
    }
}

fn install(dst: &mut ParamStore, src: ParamStore, section: &str) -> Result<()> {
    if dst.names != src.names {
        return Err(Error::Data(format!("{section} parameters do not match the network layout")));
    }
    for (k, v) in src.values.into_iter().enumerate() {
        if v.shape() != dst.values[k].shape() {
            return Err(Error::Data(format!("{section} parameter {} has shape {:?}", dst.names[k], v.shape())));
        }
        dst.values[k] = v;
    }
    Ok(())
}

fn read_section(r: &mut Reader, want: &str) -> Result<(ParamStore, Adam)> {
    let name = r.str()?;
    if name != want {
        return Err(Error::Data(format!("expected section {want}, found {name}")));
    }
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let t = r.u64()?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for _ in 0..count {
        let pname = r.str()?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let value = r.tensor(rows, cols)?;
        store.add(&pname, value)?;
        m.push(r.tensor(rows, cols)?);
        v.push(r.tensor(rows, cols)?);
    }
    Ok((store, Adam { lr, beta1, beta2, eps, t, m, v }))
}

struct Writer(Vec<u8>);

impl Writer {
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
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Data("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
    fn tensor(&mut self, rows: usize, cols: usize) -> Result<Tensor2> {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Data("tensor shape overflows".into()))?;
        if n.saturating_mul(8) > self.bytes.len() - self.at {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor2::from_vec(rows, cols, data)?)
    }
}
