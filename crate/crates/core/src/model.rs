//! Parameter layout of a full model: embedding table, noise schedule and denoiser.

use rand::Rng;

use crate::autograd::{ParamId, ParamStore};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{InteriorMap, MonotoneNet, NoiseSchedule};
use crate::embedding::{init_table, EmbeddingTable};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const DEFAULT_GAMMA0: f64 = -7.0;
pub const DEFAULT_GAMMA1: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockIds {
    pub norm1: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm2: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ModelIds {
    pub embed: ParamId,
    pub gamma0: ParamId,
    pub gamma1: ParamId,
    pub interior: ParamId,
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub time_w: ParamId,
    pub time_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_norm: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Which optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embedding,
    ScheduleEndpoint,
    ScheduleInterior,
    Denoiser,
}

/// All trainable state of a diffusion language model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    pub(crate) ids: ModelIds,
}

/// Name, shape and init scale of every tensor, in storage order.
fn layout(cfg: &DenoiserConfig) -> Vec<(String, (usize, usize), Init)> {
    let (w, d, v) = (cfg.width, cfg.embed_dim, cfg.vocab);
    let hidden = cfg.mlp_ratio * w;
    let resid = 1.0 / (2.0 * cfg.depth as f64).sqrt();
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let mut out = vec![
        ("embedding.weight".into(), (v, d), Init::Embedding),
        ("schedule.gamma0".into(), (1, 1), Init::Const(DEFAULT_GAMMA0)),
        ("schedule.gamma1".into(), (1, 1), Init::Const(DEFAULT_GAMMA1)),
        ("schedule.interior".into(), (1, 3 * cfg.schedule_hidden + 1), Init::Interior),
        ("denoiser.input.weight".into(), (2 * d, w), Init::Normal(fan(2 * d))),
        ("denoiser.input.bias".into(), (1, w), Init::Const(0.0)),
        ("denoiser.time.weight".into(), (cfg.time_dim, w), Init::Normal(fan(cfg.time_dim))),
        ("denoiser.time.bias".into(), (1, w), Init::Const(0.0)),
        ("denoiser.position".into(), (cfg.max_len, w), Init::Normal(0.1)),
    ];
    for l in 0..cfg.depth {
        let p = |s: &str| format!("denoiser.block{l}.{s}");
        out.extend([
            (p("attn_norm.gain"), (1, w), Init::Const(1.0)),
            (p("attn.wq"), (w, w), Init::Normal(fan(w))),
            (p("attn.wk"), (w, w), Init::Normal(fan(w))),
            (p("attn.wv"), (w, w), Init::Normal(fan(w))),
            (p("attn.wo"), (w, w), Init::Normal(fan(w) * resid)),
            (p("mlp_norm.gain"), (1, w), Init::Const(1.0)),
            (p("mlp.w1"), (w, hidden), Init::Normal(fan(w))),
            (p("mlp.b1"), (1, hidden), Init::Const(0.0)),
            (p("mlp.w2"), (hidden, w), Init::Normal(fan(hidden) * resid)),
            (p("mlp.b2"), (1, w), Init::Const(0.0)),
        ]);
    }
    out.extend([
        ("denoiser.final_norm.gain".into(), (1, w), Init::Const(1.0)),
        ("denoiser.output.weight".into(), (w, v), Init::Normal(fan(w))),
        ("denoiser.output.bias".into(), (1, v), Init::Const(0.0)),
    ]);
    out
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Const(f64),
    Normal(f64),
    Embedding,
    Interior,
}

impl Model {
    /// Freshly initialized model.
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, (r, c), init) in layout(&config) {
            let value = match init {
                Init::Const(x) => Mat::filled(r, c, x),
                Init::Normal(std) => Mat::randn(r, c, std, rng),
                Init::Embedding => init_table(r, c, rng),
                Init::Interior => Mat::from_vec(1, c, MonotoneNet::near_identity(config.schedule_hidden).raw),
            };
            params.add(name, value);
        }
        let ids = Self::resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes against the config.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", expected.len(), params.len())));
        }
        for (id, (name, shape, _)) in params.ids().zip(&expected) {
            if params.name(id) != name || params.get(id).shape() != *shape {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    params.name(id),
                    params.get(id).shape()
                )));
            }
        }
        let ids = Self::resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    fn resolve(cfg: &DenoiserConfig, params: &ParamStore) -> Result<ModelIds> {
        let get = |n: &str| params.find(n).ok_or_else(|| Error::Format(format!("missing tensor {n}")));
        let blocks = (0..cfg.depth)
            .map(|l| {
                let p = |s: &str| get(&format!("denoiser.block{l}.{s}"));
                Ok(BlockIds {
                    norm1: p("attn_norm.gain")?,
                    wq: p("attn.wq")?,
                    wk: p("attn.wk")?,
                    wv: p("attn.wv")?,
                    wo: p("attn.wo")?,
                    norm2: p("mlp_norm.gain")?,
                    w1: p("mlp.w1")?,
                    b1: p("mlp.b1")?,
                    w2: p("mlp.w2")?,
                    b2: p("mlp.b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelIds {
            embed: get("embedding.weight")?,
            gamma0: get("schedule.gamma0")?,
            gamma1: get("schedule.gamma1")?,
            interior: get("schedule.interior")?,
            in_w: get("denoiser.input.weight")?,
            in_b: get("denoiser.input.bias")?,
            time_w: get("denoiser.time.weight")?,
            time_b: get("denoiser.time.bias")?,
            pos: get("denoiser.position")?,
            blocks,
            final_norm: get("denoiser.final_norm.gain")?,
            out_w: get("denoiser.output.weight")?,
            out_b: get("denoiser.output.bias")?,
        })
    }

    pub fn table(&self) -> EmbeddingTable<'_> {
        EmbeddingTable::new(self.params.get(self.ids.embed))
    }

    pub fn embed_id(&self) -> ParamId {
        self.ids.embed
    }

    pub fn gamma_ids(&self) -> (ParamId, ParamId) {
        (self.ids.gamma0, self.ids.gamma1)
    }

    pub fn interior_id(&self) -> ParamId {
        self.ids.interior
    }

    pub fn interior_net(&self) -> MonotoneNet {
        MonotoneNet { raw: self.params.get(self.ids.interior).data.clone() }
    }

    /// Snapshot of the current noise schedule.
    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::new(
            self.params.get(self.ids.gamma0).item(),
            self.params.get(self.ids.gamma1).item(),
            InteriorMap::Learned(self.interior_net()),
        )
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        if id == self.ids.embed {
            ParamGroup::Embedding
        } else if id == self.ids.gamma0 || id == self.ids.gamma1 {
            ParamGroup::ScheduleEndpoint
        } else if id == self.ids.interior {
            ParamGroup::ScheduleInterior
        } else {
            ParamGroup::Denoiser
        }
    }

    /// Parameters of the transformer blocks and time projection: everything except the
    /// embedding table, the schedule, the input/output projections and position table.
    pub fn non_embedding_params(&self) -> usize {
        self.config.non_embedding_params()
    }
}
