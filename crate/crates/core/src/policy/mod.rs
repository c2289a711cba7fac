//! Actor-critic network: spatial encoder, recurrent core, action and value heads.

mod agent;
mod forward;
mod history;

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numkit::{orthogonal_init, read_checkpoint, write_checkpoint, Checkpoint, NumError, ParamId, ParamStore, Tensor};

pub use agent::{AgentInput, PolicyOutput};
pub use forward::{StepGraphInput, StepInputs, StepValues, StepVars};
pub use history::HistoryBuffer;

pub const NUM_ACTIONS: usize = 5;
pub const OBS_CHANNELS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid policy config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoreKind {
    #[serde(rename = "srmt")]
    Srmt,
    #[serde(rename = "rmt")]
    Rmt,
    #[serde(rename = "attention")]
    Attention,
    #[serde(rename = "empty")]
    Empty,
    #[serde(rename = "rnn")]
    Rnn,
}

impl CoreKind {
    pub const ALL: [CoreKind; 5] = [CoreKind::Srmt, CoreKind::Rmt, CoreKind::Attention, CoreKind::Empty, CoreKind::Rnn];

    pub fn name(self) -> &'static str {
        match self {
            CoreKind::Srmt => "srmt",
            CoreKind::Rmt => "rmt",
            CoreKind::Attention => "attention",
            CoreKind::Empty => "empty",
            CoreKind::Rnn => "rnn",
        }
    }

    fn has_transformer(self) -> bool {
        matches!(self, CoreKind::Srmt | CoreKind::Rmt | CoreKind::Attention)
    }

    fn has_memory_token(self) -> bool {
        matches!(self, CoreKind::Srmt | CoreKind::Rmt)
    }
}

impl fmt::Display for CoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoreKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase();
        CoreKind::ALL.into_iter().find(|c| c.name() == key).ok_or_else(|| format!("unknown core kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub core: CoreKind,
    pub obs_size: usize,
    /// Width of embeddings, attention and memory vectors.
    pub hidden: usize,
    pub heads: usize,
    /// Self-attention blocks; SRMT pairs each with a cross-attention block.
    pub blocks: usize,
    pub res_blocks: usize,
    pub filters: usize,
    pub history: usize,
    pub memory_tokens: usize,
    pub ffn_mult: usize,
    pub gru_hidden: usize,
    pub init_seed: u64,
}

impl PolicyConfig {
    pub fn mapf(core: CoreKind) -> Self {
        Self {
            core,
            obs_size: 5,
            hidden: 16,
            heads: 4,
            blocks: 1,
            res_blocks: 1,
            filters: 8,
            history: 8,
            memory_tokens: 1,
            ffn_mult: 4,
            gru_hidden: 16,
            init_seed: 0,
        }
    }

    pub fn lmapf(core: CoreKind) -> Self {
        Self {
            core,
            obs_size: 11,
            hidden: 512,
            heads: 8,
            blocks: 2,
            res_blocks: 8,
            filters: 64,
            history: 8,
            memory_tokens: 1,
            ffn_mult: 4,
            gru_hidden: 16,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.obs_size == 0 || self.obs_size.is_multiple_of(2) {
            errs.push(format!("obs_size must be odd and positive, got {}", self.obs_size));
        }
        if self.hidden < 2 {
            errs.push(format!("hidden must be at least 2, got {}", self.hidden));
        }
        if self.core.has_transformer() {
            if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
                errs.push(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads));
            }
            if self.blocks == 0 {
                errs.push("blocks must be at least 1".into());
            }
            if self.ffn_mult == 0 {
                errs.push("ffn_mult must be at least 1".into());
            }
        }
        if self.filters == 0 {
            errs.push("filters must be at least 1".into());
        }
        if self.core.has_memory_token() && self.memory_tokens == 0 {
            errs.push("memory_tokens must be at least 1".into());
        }
        if self.core == CoreKind::Rnn && self.gru_hidden < 2 {
            errs.push(format!("gru_hidden must be at least 2, got {}", self.gru_hidden));
        }
        errs
    }

    /// Length of the per-agent recurrent state vector.
    pub fn memory_width(&self) -> usize {
        match self.core {
            CoreKind::Srmt | CoreKind::Rmt => self.memory_tokens * self.hidden,
            CoreKind::Rnn => self.gru_hidden,
            CoreKind::Attention | CoreKind::Empty => 0,
        }
    }

    /// Token slots: memory tokens, history, current.
    pub fn slots(&self) -> usize {
        self.memory_tokens + self.history + 1
    }

    fn head_input(&self) -> usize {
        if self.core == CoreKind::Rnn {
            self.gru_hidden
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    pub conv1: ParamId,
    pub conv2: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    pub conv_in: ParamId,
    pub res: Vec<ResBlock>,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnBlock {
    pub ln_q: Norm,
    /// Separate norm for pooled keys and values (cross-attention only).
    pub ln_kv: Option<Norm>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_ff: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Gru {
    pub wz: Linear,
    pub wr: Linear,
    pub wn: Linear,
    pub uz: ParamId,
    pub ur: ParamId,
    pub un: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub encoder: Encoder,
    pub pos: Option<ParamId>,
    pub self_attn: Vec<AttnBlock>,
    pub cross_attn: Vec<AttnBlock>,
    pub ln_final: Option<Norm>,
    pub memory_head: Option<Linear>,
    pub init_head: Option<Linear>,
    pub gru: Option<Gru>,
    pub action: Linear,
    pub critic: Linear,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    counter: u64,
}

impl Builder<'_> {
    fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.counter)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize, gain: f64) -> ParamId {
        let seed = self.next_seed();
        let mut t = orthogonal_init(rows, cols, seed);
        t.data_mut().iter_mut().for_each(|x| *x *= gain);
        self.store.add(name, t)
    }

    fn linear(&mut self, name: &str, input: usize, output: usize, gain: f64) -> Linear {
        let w = self.matrix(&format!("{name}.w"), input, output, gain);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gain = self.store.add(format!("{name}.gain"), Tensor::ones(&[d]));
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(&[d]));
        Norm { gain, bias }
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in: usize) -> ParamId {
        let seed = self.next_seed();
        let t = orthogonal_init(c_out, c_in * 9, seed).reshape(&[c_out, c_in, 3, 3]).expect("conv shape");
        self.store.add(name, t)
    }

    fn attn(&mut self, name: &str, d: usize, ffn: usize, cross: bool) -> AttnBlock {
        AttnBlock {
            ln_q: self.norm(&format!("{name}.ln_q"), d),
            ln_kv: cross.then(|| self.norm(&format!("{name}.ln_kv"), d)),
            q: self.linear(&format!("{name}.q"), d, d, 1.0),
            k: self.linear(&format!("{name}.k"), d, d, 1.0),
            v: self.linear(&format!("{name}.v"), d, d, 1.0),
            o: self.linear(&format!("{name}.o"), d, d, 1.0),
            ln_ff: self.norm(&format!("{name}.ln_ff"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, ffn, 1.0),
            ff2: self.linear(&format!("{name}.ff2"), ffn, d, 1.0),
        }
    }
}

/// A shared policy: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    params: ParamStore,
    layout: Layout,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self, PolicyError> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(PolicyError::Config(errs.join("; ")));
        }
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, seed: config.init_seed, counter: 0 };
        let (d, f, m) = (config.hidden, config.filters, config.obs_size);
        let encoder = Encoder {
            conv_in: b.conv("enc.conv_in", f, OBS_CHANNELS),
            res: (0..config.res_blocks)
                .map(|i| ResBlock {
                    conv1: b.conv(&format!("enc.res{i}.conv1"), f, f),
                    conv2: b.conv(&format!("enc.res{i}.conv2"), f, f),
                })
                .collect(),
            proj: b.linear("enc.proj", f * m * m, d, 1.0),
        };
        let ffn = config.ffn_mult * d;
        let transformer = config.core.has_transformer();
        let pos = transformer.then(|| {
            let seed = b.next_seed();
            let mut t = orthogonal_init(config.slots(), d, seed);
            t.data_mut().iter_mut().for_each(|x| *x *= 0.1);
            b.store.add("pos", t)
        });
        let self_attn = if transformer {
            (0..config.blocks).map(|i| b.attn(&format!("sa{i}"), d, ffn, false)).collect()
        } else {
            Vec::new()
        };
        let cross_attn = if config.core == CoreKind::Srmt {
            (0..config.blocks).map(|i| b.attn(&format!("ca{i}"), d, ffn, true)).collect()
        } else {
            Vec::new()
        };
        let ln_final = transformer.then(|| b.norm("ln_final", d));
        let memory_head = config.core.has_memory_token().then(|| b.linear("memory_head", d, d, 1.0));
        let init_head = config.core.has_memory_token().then(|| b.linear("init_head", d, config.memory_width(), 1.0));
        let gru = (config.core == CoreKind::Rnn).then(|| {
            let h = config.gru_hidden;
            Gru {
                wz: b.linear("gru.wz", d, h, 1.0),
                wr: b.linear("gru.wr", d, h, 1.0),
                wn: b.linear("gru.wn", d, h, 1.0),
                uz: b.matrix("gru.uz", h, h, 1.0),
                ur: b.matrix("gru.ur", h, h, 1.0),
                un: b.linear("gru.un", h, h, 1.0),
            }
        });
        let hi = config.head_input();
        let action = b.linear("action", hi, NUM_ACTIONS, 0.01);
        let critic = b.linear("critic", hi, 1, 1.0);
        let layout = Layout {
            encoder,
            pos,
            self_attn,
            cross_attn,
            ln_final,
            memory_head,
            init_head,
            gru,
            action,
            critic,
        };
        Ok(Self { config, params: store, layout })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn memory_width(&self) -> usize {
        self.config.memory_width()
    }

    /// Parameter ids of the memory head, empty for cores without one.
    pub fn memory_head_params(&self) -> Vec<ParamId> {
        self.layout.memory_head.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn init_head_params(&self) -> Vec<ParamId> {
        self.layout.init_head.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Writes parameters, the policy config and `extra` tensors and metadata.
    pub fn write<W: Write>(&self, w: W, extra: &[(&str, &Tensor)], meta: serde_json::Value) -> Result<(), PolicyError> {
        let mut tensors: Vec<(&str, &Tensor)> = self.params.iter().collect();
        tensors.extend_from_slice(extra);
        let mut meta = meta;
        if !meta.is_object() {
            meta = serde_json::json!({});
        }
        meta["policy"] = serde_json::to_value(&self.config).expect("policy config serializes");
        write_checkpoint(w, &tensors, meta)?;
        Ok(())
    }

    /// Rebuilds a policy from a checkpoint; returns the checkpoint for the
    /// caller's extra entries.
    pub fn read<R: Read>(r: R) -> Result<(Self, Checkpoint), PolicyError> {
        let ckpt = read_checkpoint(r)?;
        let config: PolicyConfig = serde_json::from_value(ckpt.meta["policy"].clone())
            .map_err(|e| PolicyError::Config(format!("checkpoint policy config: {e}")))?;
        let mut policy = Policy::new(config)?;
        policy.load_params(&ckpt)?;
        Ok((policy, ckpt))
    }

    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<(), PolicyError> {
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let t = ckpt.tensor(name).ok_or_else(|| PolicyError::Contract(format!("checkpoint lacks {name}")))?;
            let slot = &mut self.params.tensors_mut()[i];
            if slot.shape() != t.shape() {
                return Err(PolicyError::Contract(format!("{name}: shape {:?} vs {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}
