//! A small encoder-only transformer with frozen random weights.
//!
//! Every block has six linear projections that can be adapted: attention
//! `q, k, v, o` and feed-forward `w_i, w_o`. Blocks are pre-norm
//! (`x + Attn(LN(x))`, then `x + W_o·GELU(W_i·LN(x))`) and a frozen output
//! head turns the final normalized state into a vocabulary distribution at
//! every position.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::more::{MoreFlags, MoreLayer, Routing};
use crate::params::{ParamId, ParamRole, ParamSet, Session};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    #[serde(default)]
    pub ffn_width: Option<usize>,
    pub heads: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl BackboneConfig {
    pub fn ffn(&self) -> usize {
        self.ffn_width.unwrap_or(self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("width", self.width),
            ("ffn_width", self.ffn()),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone.{name} must be >= 1")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "backbone.width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 16,
            ffn_width: None,
            heads: 2,
            vocab_size: 32,
            seq_len: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    None,
    LoraFixed,
    #[default]
    More,
}

/// Adapter settings applied uniformly to every site.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSpec {
    pub mode: AdapterMode,
    pub rank: usize,
    pub num_tasks: usize,
    pub embed_dim: usize,
    pub alpha: f64,
    pub flags: MoreFlags,
    /// One embedding row shared by all tasks instead of one per task.
    pub shared_embedding: bool,
}

impl AdapterSpec {
    pub fn none() -> Self {
        Self {
            mode: AdapterMode::None,
            rank: 1,
            num_tasks: 1,
            embed_dim: 1,
            alpha: 1.0,
            flags: MoreFlags::default(),
            shared_embedding: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Q,
    K,
    V,
    O,
    Wi,
    Wo,
}

impl Site {
    pub const ALL: [Site; 6] = [Site::Q, Site::K, Site::V, Site::O, Site::Wi, Site::Wo];

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
            Site::Wi => "wi",
            Site::Wo => "wo",
        }
    }

    pub fn parse(s: &str) -> Option<Site> {
        Site::ALL.into_iter().find(|site| site.name() == s)
    }

    /// `(out, in)` dims of this projection.
    pub fn dims(self, config: &BackboneConfig) -> (usize, usize) {
        match self {
            Site::Wi => (config.ffn(), config.width),
            Site::Wo => (config.width, config.ffn()),
            _ => (config.width, config.width),
        }
    }
}

/// One adaptable projection.
#[derive(Clone, Debug)]
pub enum Projection {
    Frozen { w0: ParamId, out_dim: usize, in_dim: usize },
    Lora(LoraAdapter),
    More(Box<MoreLayer>),
}

impl Projection {
    pub fn w0(&self) -> ParamId {
        match self {
            Projection::Frozen { w0, .. } => *w0,
            Projection::Lora(l) => l.w0,
            Projection::More(m) => m.adapter.w0,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Projection::Frozen { out_dim, in_dim, .. } => (*out_dim, *in_dim),
            Projection::Lora(l) => (l.out_dim, l.in_dim),
            Projection::More(m) => (m.adapter.out_dim, m.adapter.in_dim),
        }
    }

    pub fn as_more(&self) -> Option<&MoreLayer> {
        match self {
            Projection::More(m) => Some(m),
            _ => None,
        }
    }

    fn forward(&mut self, s: &mut Session<'_>, x: Var, task: Option<usize>) -> Result<Var> {
        match self {
            Projection::Frozen { w0, .. } => {
                let w = s.bind(*w0);
                let wt = s.graph.transpose(w)?;
                s.graph.matmul(x, wt)
            }
            Projection::Lora(l) => l.forward(s, x),
            Projection::More(m) => {
                let task = task.ok_or(Error::InvalidArgument(
                    "MoRE projections need a task id".into(),
                ))?;
                m.forward(s, x, task)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub sites: Vec<Projection>,
}

impl Block {
    pub fn site(&self, site: Site) -> &Projection {
        &self.sites[site as usize]
    }

    pub fn site_mut(&mut self, site: Site) -> &mut Projection {
        &mut self.sites[site as usize]
    }
}

/// Input to one MoRE site, mean-pooled over each sample's positions.
#[derive(Clone, Copy, Debug)]
pub struct PooledInput {
    pub layer: usize,
    pub site: Site,
    /// `batch × d`
    pub pooled: Var,
}

pub struct ForwardOutput {
    /// `(batch·seq) × vocab`, one distribution per position, sample-major.
    pub probs: Var,
    pub pooled: Vec<PooledInput>,
    pub batch: usize,
    pub seq: usize,
}

impl ForwardOutput {
    pub fn row(&self, sample: usize, position: usize) -> usize {
        sample * self.seq + position
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub spec: AdapterSpec,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub head: ParamId,
    pub blocks: Vec<Block>,
}

/// Parameters plus architecture.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: ParamSet,
    pub backbone: Backbone,
}

impl Model {
    /// Frozen weights come from the backbone stream of `seed` and do not
    /// depend on `spec`, so models built with the same seed share a backbone.
    pub fn build(config: &BackboneConfig, spec: &AdapterSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut brng = stream(seed, Stream::Backbone, 0);
        let mut arng = stream(seed, Stream::Adapters, 0);
        let mut params = ParamSet::new();
        let (v, m) = (config.vocab_size, config.width);
        let token_embedding = params.add("embed.tokens", Tensor::randn(v, m, 1.0, &mut brng), ParamRole::Frozen);
        let position_embedding =
            params.add("embed.positions", Tensor::randn(config.seq_len, m, 1.0, &mut brng), ParamRole::Frozen);

        if spec.mode != AdapterMode::None {
            if spec.rank == 0 {
                return Err(Error::Config("adapter.rank must be >= 1".into()));
            }
            let min_dim = m.min(config.ffn());
            if spec.rank > min_dim {
                return Err(Error::Config(format!(
                    "adapter.rank {} exceeds smallest projection dim {min_dim}",
                    spec.rank
                )));
            }
        }
        if spec.mode == AdapterMode::More {
            if spec.num_tasks == 0 {
                return Err(Error::Config("MoRE needs at least one task".into()));
            }
            if spec.embed_dim != m || config.ffn() != m {
                return Err(Error::Config(format!(
                    "MoRE compares task embeddings with site inputs, so adapter.embed_dim ({}) and \
                     backbone.ffn_width ({}) must equal backbone.width ({m})",
                    spec.embed_dim,
                    config.ffn()
                )));
            }
        }

        let mut blocks = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            let mut sites = Vec::with_capacity(6);
            for site in Site::ALL {
                let (out_dim, in_dim) = site.dims(config);
                let w0 = Tensor::randn(out_dim, in_dim, (1.0 / in_dim as f64).sqrt(), &mut brng);
                let name = format!("layers.{layer}.{}", site.name());
                let proj = match spec.mode {
                    AdapterMode::None => Projection::Frozen {
                        w0: params.add(format!("{name}.w0"), w0, ParamRole::Frozen),
                        out_dim,
                        in_dim,
                    },
                    AdapterMode::LoraFixed => Projection::Lora(
                        LoraAdapter::init(&mut params, &name, w0, spec.rank, &mut arng)?
                            .with_alpha(spec.alpha),
                    ),
                    AdapterMode::More => {
                        let lora = LoraAdapter::init(&mut params, &name, w0, spec.rank, &mut arng)?;
                        let rows = if spec.shared_embedding { 1 } else { spec.num_tasks };
                        Projection::More(Box::new(MoreLayer::init(
                            &mut params,
                            &name,
                            lora,
                            spec.num_tasks,
                            rows,
                            spec.embed_dim,
                            spec.flags,
                            &mut arng,
                        )?))
                    }
                };
                sites.push(proj);
            }
            blocks.push(Block { sites });
        }
        let head = params.add(
            "head",
            Tensor::randn(v, m, 2.0 / (m as f64).sqrt(), &mut brng),
            ParamRole::Frozen,
        );
        Ok(Self {
            params,
            backbone: Backbone {
                config: config.clone(),
                spec: spec.clone(),
                token_embedding,
                position_embedding,
                head,
                blocks,
            },
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn num_sites(&self) -> usize {
        self.backbone.blocks.len() * 6
    }

    pub fn sites(&self) -> impl Iterator<Item = (usize, Site, &Projection)> {
        self.backbone
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(l, b)| Site::ALL.into_iter().map(move |s| (l, s, b.site(s))))
    }

    pub fn more_layers(&self) -> Vec<&MoreLayer> {
        self.sites().filter_map(|(_, _, p)| p.as_more()).collect()
    }

    pub fn more_layers_mut(&mut self) -> impl Iterator<Item = &mut MoreLayer> {
        self.backbone
            .blocks
            .iter_mut()
            .flat_map(|b| b.sites.iter_mut())
            .filter_map(|p| match p {
                Projection::More(m) => Some(m.as_mut()),
                _ => None,
            })
    }

    /// Switch every MoRE site to its task→rank lookup table.
    pub fn freeze_mapping(&mut self) -> Result<()> {
        let Model { params, backbone } = self;
        for block in &mut backbone.blocks {
            for proj in &mut block.sites {
                if let Projection::More(m) = proj {
                    m.freeze_mapping(params)?;
                }
            }
        }
        Ok(())
    }

    pub fn routings(&self) -> Vec<Routing> {
        self.more_layers().iter().map(|m| m.routing.clone()).collect()
    }

    pub fn forward(
        &mut self,
        s: &mut Session<'_>,
        tokens: &[Vec<usize>],
        task: Option<usize>,
    ) -> Result<ForwardOutput> {
        self.backbone.forward(s, tokens, task)
    }

    /// Forward without recording gradients; returns the probability table.
    pub fn predict(&mut self, tokens: &[Vec<usize>], task: Option<usize>) -> Result<Tensor> {
        let Model { params, backbone } = self;
        let mut s = Session::new(params);
        let out = backbone.forward(&mut s, tokens, task)?;
        Ok(s.graph.value(out.probs).clone())
    }
}

impl Backbone {
    pub fn forward(
        &mut self,
        s: &mut Session<'_>,
        tokens: &[Vec<usize>],
        task: Option<usize>,
    ) -> Result<ForwardOutput> {
        let batch = tokens.len();
        let seq = tokens.first().map_or(0, Vec::len);
        if batch == 0 || seq == 0 {
            return Err(Error::Empty("token batch"));
        }
        if seq > self.config.seq_len || tokens.iter().any(|t| t.len() != seq) {
            return Err(Error::InvalidArgument(format!(
                "every sample needs the same length <= {}",
                self.config.seq_len
            )));
        }
        let vocab = self.config.vocab_size;
        let flat: Vec<usize> = tokens.concat();
        if let Some(&bad) = flat.iter().find(|&&t| t >= vocab) {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: bad,
                len: vocab,
            });
        }
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();

        let tok = s.bind(self.token_embedding);
        let pos = s.bind(self.position_embedding);
        let te = s.graph.select_rows(tok, &flat)?;
        let pe = s.graph.select_rows(pos, &positions)?;
        let mut x = s.graph.add(te, pe)?;

        let mut pool = Tensor::zeros(batch, batch * seq);
        for b in 0..batch {
            for p in 0..seq {
                pool.set(b, b * seq + p, 1.0 / seq as f64);
            }
        }
        let pool = s.graph.constant(pool);
        let mut pooled = Vec::new();

        let heads = self.config.heads;
        let head_dim = self.config.width / heads;
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();

        for (layer, block) in self.blocks.iter_mut().enumerate() {
            let a = s.graph.layer_norm(x)?;
            let a_pool = pool_if_needed(s, block, &[Site::Q, Site::K, Site::V], pool, a)?;
            record(&mut pooled, layer, block, &[Site::Q, Site::K, Site::V], a_pool);
            let q = block.site_mut(Site::Q).forward(s, a, task)?;
            let k = block.site_mut(Site::K).forward(s, a, task)?;
            let v = block.site_mut(Site::V).forward(s, a, task)?;

            let mut samples = Vec::with_capacity(batch);
            for b in 0..batch {
                let qb = s.graph.row_range(q, b * seq, seq)?;
                let kb = s.graph.row_range(k, b * seq, seq)?;
                let vb = s.graph.row_range(v, b * seq, seq)?;
                let mut outs = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qh = s.graph.col_range(qb, h * head_dim, head_dim)?;
                    let kh = s.graph.col_range(kb, h * head_dim, head_dim)?;
                    let vh = s.graph.col_range(vb, h * head_dim, head_dim)?;
                    let kt = s.graph.transpose(kh)?;
                    let scores = s.graph.matmul(qh, kt)?;
                    let scores = s.graph.scale(scores, inv_sqrt)?;
                    let attn = s.graph.softmax(scores, 1.0)?;
                    outs.push(s.graph.matmul(attn, vh)?);
                }
                samples.push(if heads == 1 { outs[0] } else { s.graph.concat_cols(&outs)? });
            }
            let mixed = if batch == 1 { samples[0] } else { s.graph.concat_rows(&samples)? };
            let o_pool = pool_if_needed(s, block, &[Site::O], pool, mixed)?;
            record(&mut pooled, layer, block, &[Site::O], o_pool);
            let o = block.site_mut(Site::O).forward(s, mixed, task)?;
            x = s.graph.add(x, o)?;

            let f = s.graph.layer_norm(x)?;
            let f_pool = pool_if_needed(s, block, &[Site::Wi], pool, f)?;
            record(&mut pooled, layer, block, &[Site::Wi], f_pool);
            let u = block.site_mut(Site::Wi).forward(s, f, task)?;
            let u = s.graph.gelu(u)?;
            let u_pool = pool_if_needed(s, block, &[Site::Wo], pool, u)?;
            record(&mut pooled, layer, block, &[Site::Wo], u_pool);
            let w = block.site_mut(Site::Wo).forward(s, u, task)?;
            x = s.graph.add(x, w)?;
        }

        let xf = s.graph.layer_norm(x)?;
        let head = s.bind(self.head);
        let ht = s.graph.transpose(head)?;
        let logits = s.graph.matmul(xf, ht)?;
        let probs = s.graph.softmax(logits, 1.0)?;
        Ok(ForwardOutput {
            probs,
            pooled,
            batch,
            seq,
        })
    }
}

fn pool_if_needed(
    s: &mut Session<'_>,
    block: &Block,
    sites: &[Site],
    pool: Var,
    input: Var,
) -> Result<Option<Var>> {
    if sites.iter().any(|&site| block.site(site).as_more().is_some()) {
        Ok(Some(s.graph.matmul(pool, input)?))
    } else {
        Ok(None)
    }
}

fn record(out: &mut Vec<PooledInput>, layer: usize, block: &Block, sites: &[Site], pooled: Option<Var>) {
    if let Some(pooled) = pooled {
        for &site in sites {
            if block.site(site).as_more().is_some() {
                out.push(PooledInput { layer, site, pooled });
            }
        }
    }
}
