//! The denoising network: dense embeddings with positional encoding,
//! bidirectional selective-scan encoders, and two decoder branches of
//! adaLN-conditioned blocks (lag-fusion blocks over time, permuted-scan
//! blocks over channels) whose projections are summed.

use crate::array::DenseArray;
use crate::autodiff::{Graph, Var};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::ssm::{default_period, scan_node};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const LN_EPS: f64 = 1e-6;
const MLP_EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub channels: usize,
    pub hidden_dim: usize,
    pub state_dim: usize,
    pub num_encoders: usize,
    pub num_difm: usize,
    pub num_dipm: usize,
    pub dilation_factors: Vec<usize>,
    /// Reshape period for the lag set; `None` picks the divisor of
    /// `seq_len` nearest its square root.
    pub period: Option<usize>,
    /// Initial fusion weight of every non-zero lag (the current state
    /// starts at 1).
    pub lag_weight_init: f64,
    pub time_features: usize,
    pub diffusion_steps: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(seq_len: usize, channels: usize) -> Self {
        Self {
            seq_len,
            channels,
            hidden_dim: 128,
            state_dim: 16,
            num_encoders: 1,
            num_difm: 3,
            num_dipm: 3,
            dilation_factors: vec![1, 2, 3],
            period: None,
            lag_weight_init: 0.1,
            time_features: 128,
            diffusion_steps: 500,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("channels", self.channels),
            ("hidden_dim", self.hidden_dim),
            ("state_dim", self.state_dim),
            ("num_difm", self.num_difm),
            ("num_dipm", self.num_dipm),
            ("time_features", self.time_features),
            ("diffusion_steps", self.diffusion_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % 2 == 1 {
            return Err(Error::OddDimension(self.hidden_dim));
        }
        if self.time_features % 2 == 1 {
            return Err(Error::OddDimension(self.time_features));
        }
        if self.dilation_factors.contains(&0) {
            return Err(Error::Config("dilation factors must be positive".into()));
        }
        if let Some(p) = self.period {
            if p == 0 {
                return Err(Error::InvalidPeriod(p));
            }
        }
        if !self.lag_weight_init.is_finite() {
            return Err(Error::Config("lag_weight_init must be finite".into()));
        }
        Ok(())
    }

    pub fn lag_period(&self) -> usize {
        self.period.unwrap_or_else(|| default_period(self.seq_len))
    }

    /// Lag offsets `{0} U {f * period}`; duplicates are dropped.
    pub fn lag_offsets(&self) -> Vec<usize> {
        let p = self.lag_period();
        let mut out = vec![0];
        for f in &self.dilation_factors {
            let o = f * p;
            if !out.contains(&o) {
                out.push(o);
            }
        }
        out
    }
}

/// Named parameter arrays in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseArray>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseArray) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.values.iter().map(DenseArray::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&DenseArray> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[DenseArray] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DenseArray] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Puts every parameter on the graph, as trainable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        Bound(vars)
    }

    /// Replaces the values with ones of identical names and shapes.
    pub fn load(&mut self, arrays: Vec<(String, DenseArray)>) -> Result<()> {
        if arrays.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "{} arrays stored, model has {}",
                arrays.len(),
                self.len()
            )));
        }
        for (i, (name, value)) in arrays.into_iter().enumerate() {
            if name != self.names[i] || value.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "array {i}: stored {name} {:?}, expected {} {:?}",
                    value.shape(),
                    self.names[i],
                    self.values[i].shape()
                )));
            }
            self.values[i] = value;
        }
        Ok(())
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> DenseArray {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    DenseArray::new(shape.to_vec(), data).expect("valid shape")
}

/// Affine map `x W + b` on row vectors.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        inp: usize,
        out: usize,
    ) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[inp, out], bound));
        let b = store.add(format!("{name}.b"), uniform(rng, &[out], bound));
        Self { w, b }
    }

    fn zeros(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Self {
        let w = store.add(format!("{name}.w"), DenseArray::zeros(&[inp, out]));
        let b = store.add(format!("{name}.b"), DenseArray::zeros(&[out]));
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, p.var(self.w))?;
        g.add(xw, p.var(self.b))
    }
}

/// Selective-scan layer: input-dependent `Delta`, `B`, `C`, a diagonal
/// `A = -exp(a_log)`, a skip term and a SiLU gate, then an output map.
#[derive(Debug, Clone)]
pub struct Mamba {
    pub delta: Dense,
    pub b: Dense,
    pub c: Dense,
    pub a_log: ParamId,
    pub skip: ParamId,
    pub gate: Dense,
    pub out: Dense,
    pub lag_weights: Option<ParamId>,
}

impl Mamba {
    fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        n: usize,
        lags: Option<(usize, f64)>,
    ) -> Self {
        let delta = Dense::init(store, rng, &format!("{name}.delta"), d, d);
        // step sizes start log-uniform in [1e-3, 1e-1]
        let bias: Vec<f64> = (0..d)
            .map(|_| {
                let dt = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                dt.exp_m1().ln()
            })
            .collect();
        *store.get_mut(delta.b) = DenseArray::vector(bias);
        let b = Dense::init(store, rng, &format!("{name}.b_proj"), d, n);
        let c = Dense::init(store, rng, &format!("{name}.c_proj"), d, n);
        let a_log = store.add(
            format!("{name}.a_log"),
            DenseArray::from_fn2(d, n, |_, j| ((j + 1) as f64).ln()),
        );
        let skip = store.add(format!("{name}.skip"), DenseArray::ones(&[d]));
        let gate = Dense::init(store, rng, &format!("{name}.gate"), d, d);
        let out = Dense::init(store, rng, &format!("{name}.out"), d, d);
        let lag_weights = lags.map(|(count, init)| {
            let mut w = vec![init; count];
            w[0] = 1.0;
            store.add(format!("{name}.lag_weights"), DenseArray::vector(w))
        });
        Self {
            delta,
            b,
            c,
            a_log,
            skip,
            gate,
            out,
            lag_weights,
        }
    }

    /// `z` is `[K x d]`; `offsets` are used only when the layer owns lag
    /// weights.
    pub fn apply(&self, g: &mut Graph, p: &Bound, z: Var, offsets: &[usize]) -> Result<Var> {
        let pre = self.delta.apply(g, p, z)?;
        let delta = g.softplus(pre);
        let b = self.b.apply(g, p, z)?;
        let c = self.c.apply(g, p, z)?;
        let ea = g.exp(p.var(self.a_log));
        let a = g.scale(ea, -1.0);
        let lags = self.lag_weights.map(|id| (offsets, p.var(id)));
        let y = scan_node(g, z, delta, a, b, c, lags)?;
        let dz = g.mul(z, p.var(self.skip))?;
        let y = g.add(y, dz)?;
        let gpre = self.gate.apply(g, p, z)?;
        let gate = g.silu(gpre);
        let y = g.mul(y, gate)?;
        self.out.apply(g, p, y)
    }
}

/// Two scans in opposite directions over the same tokens, outputs summed.
#[derive(Debug, Clone)]
pub struct BiMamba {
    pub forward: Mamba,
    pub backward: Mamba,
}

pub fn bimamba_encode(g: &mut Graph, p: &Bound, layer: &BiMamba, z: Var) -> Result<Var> {
    let fwd = layer.forward.apply(g, p, z, &[0])?;
    let rev = g.reverse_rows(z);
    let bwd = layer.backward.apply(g, p, rev, &[0])?;
    let bwd = g.reverse_rows(bwd);
    g.add(fwd, bwd)
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(..)`.
pub fn positional_encoding(len: usize, d: usize) -> Result<DenseArray> {
    if d % 2 == 1 {
        return Err(Error::OddDimension(d));
    }
    Ok(DenseArray::from_fn2(len, d, |pos, j| {
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Sinusoidal features of an integer step, `[sin(t f_i) .., cos(t f_i) ..]`
/// with geometric frequencies from 1 down to 1/10000.
pub fn timestep_features(t: usize, dim: usize) -> DenseArray {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[i] = arg.sin();
        data[half + i] = arg.cos();
    }
    DenseArray::matrix(1, dim, data).expect("valid shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Temporal,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// lag-fusion scan over time steps
    Fusion,
    /// scan over channels in the solved order
    Permuted,
}

/// adaLN block: `u = y + a1 * Core((1 + g1) * LN(y) + b1)`,
/// `out = u + a2 * MLP((1 + g2) * LN(u) + b2)`.
#[derive(Debug, Clone)]
pub struct Block {
    pub kind: BlockKind,
    pub ada: Dense,
    pub core: Mamba,
    pub mlp_in: Dense,
    pub mlp_out: Dense,
}

/// The six conditioning rows `[a1, b1, g1, a2, b2, g2]`, each `[1 x d]`.
pub struct AdaLnChunks {
    pub alpha1: Var,
    pub beta1: Var,
    pub gamma1: Var,
    pub alpha2: Var,
    pub beta2: Var,
    pub gamma2: Var,
}

impl AdaLnChunks {
    pub fn split(g: &mut Graph, packed: Var, d: usize) -> Result<Self> {
        if g.shape(packed) != [1, 6 * d] {
            return Err(Error::ShapeMismatch(format!(
                "adaLN vector {:?}, expected [1, {}]",
                g.shape(packed),
                6 * d
            )));
        }
        let mut c = [packed; 6];
        for (i, slot) in c.iter_mut().enumerate() {
            *slot = g.slice_cols(packed, i * d, d)?;
        }
        Ok(Self {
            alpha1: c[0],
            beta1: c[1],
            gamma1: c[2],
            alpha2: c[3],
            beta2: c[4],
            gamma2: c[5],
        })
    }
}

/// Everything a block needs besides its input.
pub struct BlockContext<'a> {
    /// `silu(t_emb)`, `[1 x d]`
    pub cond: Var,
    pub offsets: &'a [usize],
    /// scan order for permuted blocks and its inverse
    pub order: &'a [usize],
    pub inverse: &'a [usize],
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let s = g.mul(n, scale)?;
    let s = g.add(s, n)?;
    g.add(s, shift)
}

impl Block {
    fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        kind: BlockKind,
        cfg: &ModelConfig,
        lag_count: usize,
    ) -> Self {
        let d = cfg.hidden_dim;
        let ada = Dense::zeros(store, &format!("{name}.ada"), d, 6 * d);
        let lags = match kind {
            BlockKind::Fusion => Some((lag_count, cfg.lag_weight_init)),
            BlockKind::Permuted => None,
        };
        let core = Mamba::init(store, rng, &format!("{name}.core"), d, cfg.state_dim, lags);
        let mlp_in = Dense::init(store, rng, &format!("{name}.mlp_in"), d, MLP_EXPANSION * d);
        let mlp_out = Dense::init(store, rng, &format!("{name}.mlp_out"), MLP_EXPANSION * d, d);
        Self {
            kind,
            ada,
            core,
            mlp_in,
            mlp_out,
        }
    }

    pub fn chunks(&self, g: &mut Graph, p: &Bound, cond: Var) -> Result<AdaLnChunks> {
        let d = g.shape(cond)[1];
        let packed = self.ada.apply(g, p, cond)?;
        AdaLnChunks::split(g, packed, d)
    }

    pub fn apply(&self, g: &mut Graph, p: &Bound, y: Var, ctx: &BlockContext) -> Result<Var> {
        let ch = self.chunks(g, p, ctx.cond)?;
        let h = modulate(g, y, ch.beta1, ch.gamma1)?;
        let core = match self.kind {
            BlockKind::Fusion => self.core.apply(g, p, h, ctx.offsets)?,
            BlockKind::Permuted => {
                let hp = g.gather_rows(h, ctx.order)?;
                let s = self.core.apply(g, p, hp, &[0])?;
                g.gather_rows(s, ctx.inverse)?
            }
        };
        let gated = g.mul(core, ch.alpha1)?;
        let u = g.add(y, gated)?;
        let h2 = modulate(g, u, ch.beta2, ch.gamma2)?;
        let m = self.mlp_in.apply(g, p, h2)?;
        let m = g.gelu(m);
        let m = self.mlp_out.apply(g, p, m)?;
        let gated = g.mul(m, ch.alpha2)?;
        g.add(u, gated)
    }
}

/// Time-step block for the temporal branch.
pub fn difm_block(
    g: &mut Graph,
    p: &Bound,
    block: &Block,
    y: Var,
    ctx: &BlockContext,
) -> Result<Var> {
    debug_assert_eq!(block.kind, BlockKind::Fusion);
    block.apply(g, p, y, ctx)
}

/// Channel block for the channel branch.
pub fn dipm_block(
    g: &mut Graph,
    p: &Bound,
    block: &Block,
    y: Var,
    ctx: &BlockContext,
) -> Result<Var> {
    debug_assert_eq!(block.kind, BlockKind::Permuted);
    block.apply(g, p, y, ctx)
}

/// Runs `count` blocks with the skip wiring
/// `Y0 = B0(Z)`, `Y1 = B1(Y0 + Z)`, `Yi = Bi(Y(i-1) + Y(i-2))`,
/// and returns the sum of all block outputs.
pub fn decoder_stack(
    g: &mut Graph,
    z: Var,
    count: usize,
    mut block: impl FnMut(&mut Graph, usize, Var) -> Result<Var>,
) -> Result<Var> {
    if count == 0 {
        return Err(Error::EmptyStack);
    }
    let mut prev2 = z;
    let mut prev1 = block(g, 0, z)?;
    let mut total = prev1;
    for i in 1..count {
        let input = g.add(prev1, prev2)?;
        let y = block(g, i, input)?;
        total = g.add(total, y)?;
        prev2 = prev1;
        prev1 = y;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
struct BranchLayers {
    embed: Dense,
    encoders: Vec<BiMamba>,
    blocks: Vec<Block>,
    project: Dense,
}

#[derive(Debug, Clone)]
struct Layout {
    time_in: Dense,
    time_out: Dense,
    temporal: BranchLayers,
    channel: BranchLayers,
}

fn build_layout(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Layout {
    let d = cfg.hidden_dim;
    let n = cfg.state_dim;
    let lag_count = cfg.lag_offsets().len();
    let time_in = Dense::init(store, rng, "time.in", cfg.time_features, d);
    let time_out = Dense::init(store, rng, "time.out", d, d);
    let mut branch = |prefix: &str, tokens_in: usize, count: usize, kind: BlockKind| {
        let embed = Dense::init(store, rng, &format!("{prefix}.embed"), tokens_in, d);
        let encoders = (0..cfg.num_encoders)
            .map(|i| BiMamba {
                forward: Mamba::init(store, rng, &format!("{prefix}.enc{i}.fwd"), d, n, None),
                backward: Mamba::init(store, rng, &format!("{prefix}.enc{i}.bwd"), d, n, None),
            })
            .collect();
        let blocks = (0..count)
            .map(|i| {
                Block::init(
                    store,
                    rng,
                    &format!("{prefix}.dec{i}"),
                    kind,
                    cfg,
                    lag_count,
                )
            })
            .collect();
        let project = Dense::init(store, rng, &format!("{prefix}.project"), d, tokens_in);
        BranchLayers {
            embed,
            encoders,
            blocks,
            project,
        }
    };
    let temporal = branch("temporal", cfg.channels, cfg.num_difm, BlockKind::Fusion);
    let channel = branch("channel", cfg.seq_len, cfg.num_dipm, BlockKind::Permuted);
    Layout {
        time_in,
        time_out,
        temporal,
        channel,
    }
}

/// The full denoiser `x_out(x_t, t)`.
#[derive(Debug, Clone)]
pub struct DimTs {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
    channel_order: Vec<usize>,
    inverse_order: Vec<usize>,
    offsets: Vec<usize>,
    pe: DenseArray,
}

impl DimTs {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let layout = build_layout(&config, &mut store, &mut rng);
        let pe = positional_encoding(config.seq_len, config.hidden_dim)?;
        let order: Vec<usize> = (0..config.channels).collect();
        Ok(Self {
            offsets: config.lag_offsets(),
            inverse_order: order.clone(),
            channel_order: order,
            config,
            store,
            layout,
            pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn channel_order(&self) -> &[usize] {
        &self.channel_order
    }

    /// Sets the scan order of the channel blocks; `order[k]` is the channel
    /// visited at step `k`.
    pub fn set_channel_order(&mut self, order: Vec<usize>) -> Result<()> {
        let c = self.config.channels;
        let mut inverse = vec![usize::MAX; c];
        if order.len() != c {
            return Err(Error::NotPermutation(format!("{order:?} for {c} channels")));
        }
        for (k, &ch) in order.iter().enumerate() {
            if ch >= c || inverse[ch] != usize::MAX {
                return Err(Error::NotPermutation(format!("{order:?}")));
            }
            inverse[ch] = k;
        }
        self.channel_order = order;
        self.inverse_order = inverse;
        Ok(())
    }

    pub fn lag_offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// `t_emb = W2 silu(W1 feats(t) + b1) + b2`, `[1 x d]`.
    pub fn time_embedding(&self, g: &mut Graph, p: &Bound, t: usize) -> Result<Var> {
        let f = g.constant(timestep_features(t, self.config.time_features));
        let h = self.layout.time_in.apply(g, p, f)?;
        let h = g.silu(h);
        self.layout.time_out.apply(g, p, h)
    }

    /// Temporal embedding `[L x d]` (with positional encoding) or channel
    /// embedding `[C x d]` of a `[L x C]` input.
    pub fn embed(&self, g: &mut Graph, p: &Bound, x_t: Var, which: Branch) -> Result<Var> {
        let (l, c) = (self.config.seq_len, self.config.channels);
        if g.shape(x_t) != [l, c] {
            return Err(Error::ShapeMismatch(format!(
                "input {:?}, model expects [{l}, {c}]",
                g.shape(x_t)
            )));
        }
        match which {
            Branch::Temporal => {
                let z = self.layout.temporal.embed.apply(g, p, x_t)?;
                let pe = g.constant(self.pe.clone());
                g.add(z, pe)
            }
            Branch::Channel => {
                let xc = g.transpose(x_t);
                self.layout.channel.embed.apply(g, p, xc)
            }
        }
    }

    fn branch(&self, g: &mut Graph, p: &Bound, x_t: Var, cond: Var, which: Branch) -> Result<Var> {
        let layers = match which {
            Branch::Temporal => &self.layout.temporal,
            Branch::Channel => &self.layout.channel,
        };
        let mut z = self.embed(g, p, x_t, which)?;
        for enc in &layers.encoders {
            let n = g.layer_norm(z, LN_EPS);
            let e = bimamba_encode(g, p, enc, n)?;
            z = g.add(z, e)?;
        }
        let ctx = BlockContext {
            cond,
            offsets: &self.offsets,
            order: &self.channel_order,
            inverse: &self.inverse_order,
        };
        let y = decoder_stack(g, z, layers.blocks.len(), |g, i, v| {
            layers.blocks[i].apply(g, p, v, &ctx)
        })?;
        let out = layers.project.apply(g, p, y)?;
        Ok(match which {
            Branch::Temporal => out,
            Branch::Channel => g.transpose(out),
        })
    }

    /// Builds the forward pass for one `[L x C]` window at step `t`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x_t: Var, t: usize) -> Result<Var> {
        let temb = self.time_embedding(g, p, t)?;
        let cond = g.silu(temb);
        let yt = self.branch(g, p, x_t, cond, Branch::Temporal)?;
        let yc = self.branch(g, p, x_t, cond, Branch::Channel)?;
        g.add(yt, yc)
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, x_t: &DenseArray, t: usize) -> Result<DenseArray> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let out = self.forward(&mut g, &p, x, t)?;
        Ok(g.value(out).clone())
    }

    /// Rebuilds a model from a configuration, scan order and stored arrays.
    pub fn from_parts(
        config: ModelConfig,
        channel_order: Vec<usize>,
        arrays: Vec<(String, DenseArray)>,
    ) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.store.load(arrays)?;
        model.set_channel_order(channel_order)?;
        Ok(model)
    }
}

impl Denoiser for DimTs {
    fn predict_x0(&self, x_t: &DenseArray, t: usize) -> Result<DenseArray> {
        self.predict(x_t, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_array};

    fn small(seed: u64) -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            state_dim: 2,
            num_difm: 2,
            num_dipm: 2,
            dilation_factors: vec![1, 2],
            time_features: 8,
            diffusion_steps: 20,
            seed,
            ..ModelConfig::new(8, 3)
        }
    }

    fn randomize(model: &mut DimTs, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, v) in model
            .store
            .names
            .clone()
            .iter()
            .zip(model.store.values_mut())
        {
            if name.contains(".ada.") {
                *v = random_array(&mut rng, v.shape()).map(|x| x * scale);
            }
        }
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 6).unwrap();
        for j in 0..6 {
            assert_eq!(pe.at(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.at(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.at(1, 0) - 0.84147).abs() < 1e-5);
        assert!((pe.at(2, 3) - (2.0 / 10000f64.powf(2.0 / 6.0)).cos()).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(
            positional_encoding(4, 5),
            Err(Error::OddDimension(5))
        ));
    }

    #[test]
    fn embedding_with_zero_weights() {
        let mut m = DimTs::new(small(1)).unwrap();
        for name in [
            "temporal.embed.w",
            "temporal.embed.b",
            "channel.embed.w",
            "channel.embed.b",
        ] {
            let v = m.params_mut().by_name_mut(name).unwrap();
            *v = DenseArray::zeros(v.shape());
        }
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, false);
        let x = g.constant(random_array(&mut ChaCha8Rng::seed_from_u64(2), &[8, 3]));
        let zt = m.embed(&mut g, &p, x, Branch::Temporal).unwrap();
        assert_eq!(g.value(zt), &positional_encoding(8, 8).unwrap());
        let zc = m.embed(&mut g, &p, x, Branch::Channel).unwrap();
        assert_eq!(g.shape(zc), &[3, 8]);
        assert!(g.value(zc).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(DenseArray::zeros(&[8, 2]));
        assert!(matches!(
            m.embed(&mut g, &p, bad, Branch::Temporal),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn tied_bimamba(seed: u64, d: usize) -> (ParamStore, BiMamba) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let forward = Mamba::init(&mut store, &mut rng, "f", d, 3, None);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backward = Mamba::init(&mut store, &mut rng, "b", d, 3, None);
        (store, BiMamba { forward, backward })
    }

    #[test]
    fn bimamba_palindrome() {
        let (store, layer) = tied_bimamba(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let half = random_array(&mut rng, &[3, 4]);
        let z = DenseArray::from_fn2(6, 4, |k, j| half.at(if k < 3 { k } else { 5 - k }, j));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let zv = g.constant(z);
        let y = bimamba_encode(&mut g, &p, &layer, zv).unwrap();
        let y = g.value(y);
        for k in 0..3 {
            for j in 0..4 {
                assert!((y.at(k, j) - y.at(5 - k, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bimamba_single_token() {
        let (store, layer) = tied_bimamba(5, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let z = g.constant(random_array(&mut ChaCha8Rng::seed_from_u64(6), &[1, 4]));
        let y = bimamba_encode(&mut g, &p, &layer, z).unwrap();
        let f = layer.forward.apply(&mut g, &p, z, &[0]).unwrap();
        let want = g.value(f).map(|v| 2.0 * v);
        assert!(g.value(y).max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn bimamba_gradient() {
        let (store, layer) = tied_bimamba(7, 4);
        let z0 = random_array(&mut ChaCha8Rng::seed_from_u64(8), &[4, 4]);
        let w = random_array(&mut ChaCha8Rng::seed_from_u64(9), &[4, 4]);
        let f = |z: &DenseArray| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let zv = g.param(z.clone());
            let y = bimamba_encode(&mut g, &p, &layer, zv).unwrap();
            let wv = g.constant(w.clone());
            let prod = g.mul(y, wv).unwrap();
            let s = g.sum(prod);
            g.backward(s).unwrap();
            (g.value(s).data()[0], g.grad(zv))
        };
        check_gradient(f, &z0, 1e-6, 1e-4).unwrap();
    }

    fn block_fixture(kind: BlockKind, seed: u64) -> (ModelConfig, ParamStore, Block) {
        let cfg = small(seed);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = Block::init(
            &mut store,
            &mut rng,
            "blk",
            kind,
            &cfg,
            cfg.lag_offsets().len(),
        );
        (cfg, store, block)
    }

    fn run_block(
        store: &ParamStore,
        block: &Block,
        y: &DenseArray,
        cond: &DenseArray,
        offsets: &[usize],
    ) -> DenseArray {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let cv = g.constant(cond.clone());
        let order = [2, 0, 1];
        let inverse = [1, 2, 0];
        let ctx = BlockContext {
            cond: cv,
            offsets,
            order: &order,
            inverse: &inverse,
        };
        let out = match block.kind {
            BlockKind::Fusion => difm_block(&mut g, &p, block, yv, &ctx),
            BlockKind::Permuted => dipm_block(&mut g, &p, block, yv, &ctx),
        }
        .unwrap();
        g.value(out).clone()
    }

    #[test]
    fn zero_gates_make_blocks_identity() {
        for (kind, rows) in [(BlockKind::Fusion, 8), (BlockKind::Permuted, 3)] {
            let (cfg, store, block) = block_fixture(kind, 10);
            let y = random_array(&mut ChaCha8Rng::seed_from_u64(11), &[rows, 8]);
            let cond = random_array(&mut ChaCha8Rng::seed_from_u64(12), &[1, 8]);
            let out = run_block(&store, &block, &y, &cond, &cfg.lag_offsets());
            assert_eq!(out, y);
        }
    }

    #[test]
    fn conditioning_changes_output() {
        let (cfg, mut store, block) = block_fixture(BlockKind::Fusion, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        *store.get_mut(block.ada.w) = random_array(&mut rng, &[8, 48]);
        let y = random_array(&mut rng, &[8, 8]);
        let a = run_block(
            &store,
            &block,
            &y,
            &timestep_features(3, 8),
            &cfg.lag_offsets(),
        );
        let b = run_block(
            &store,
            &block,
            &y,
            &timestep_features(40, 8),
            &cfg.lag_offsets(),
        );
        assert_eq!(a.shape(), y.shape());
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn decoder_wiring() {
        let mut g = Graph::new();
        let z = g.constant(DenseArray::vector(vec![1.0, -2.0]));
        let one = decoder_stack(&mut g, z, 1, |g, _, v| Ok(g.scale(v, 3.0))).unwrap();
        assert_eq!(g.value(one).data(), &[3.0, -6.0]);
        let three = decoder_stack(&mut g, z, 3, |_, _, v| Ok(v)).unwrap();
        assert_eq!(g.value(three).data(), &[6.0, -12.0]);
        // identity blocks give 1, 2, 3, 5, 8 times Z
        let five = decoder_stack(&mut g, z, 5, |_, _, v| Ok(v)).unwrap();
        assert_eq!(g.value(five).data(), &[19.0, -38.0]);
        let mut seen = Vec::new();
        decoder_stack(&mut g, z, 2, |g, i, v| {
            seen.push(g.value(v).data()[0]);
            Ok(g.scale(v, (i + 2) as f64))
        })
        .unwrap();
        // second block sees B0(Z) + Z = 2Z + Z
        assert_eq!(seen, vec![1.0, 3.0]);
        assert!(matches!(
            decoder_stack(&mut g, z, 0, |_, _, v| Ok(v)),
            Err(Error::EmptyStack)
        ));
    }

    #[test]
    fn output_shape_and_zero_projection() {
        let mut m = DimTs::new(small(15)).unwrap();
        randomize(&mut m, 16, 0.5);
        let x = random_array(&mut ChaCha8Rng::seed_from_u64(17), &[8, 3]);
        let out = m.predict(&x, 5).unwrap();
        assert_eq!(out.shape(), &[8, 3]);
        assert!(out.all_finite());
        for name in [
            "temporal.project.w",
            "temporal.project.b",
            "channel.project.w",
            "channel.project.b",
        ] {
            let v = m.params_mut().by_name_mut(name).unwrap();
            *v = DenseArray::zeros(v.shape());
        }
        assert!(m.predict(&x, 5).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_construction_and_forward() {
        let a = DimTs::new(small(18)).unwrap();
        let b = DimTs::new(small(18)).unwrap();
        assert_eq!(a.params(), b.params());
        let x = random_array(&mut ChaCha8Rng::seed_from_u64(19), &[8, 3]);
        assert_eq!(a.predict(&x, 7).unwrap(), b.predict(&x, 7).unwrap());
        let c = DimTs::new(small(20)).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn channel_order_validation() {
        let mut m = DimTs::new(small(21)).unwrap();
        assert!(m.set_channel_order(vec![2, 0, 1]).is_ok());
        assert_eq!(m.inverse_order, vec![1, 2, 0]);
        assert!(m.set_channel_order(vec![0, 0, 1]).is_err());
        assert!(m.set_channel_order(vec![0, 1]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = small(0);
        c.hidden_dim = 7;
        assert!(matches!(DimTs::new(c), Err(Error::OddDimension(7))));
        let mut c = small(0);
        c.num_difm = 0;
        assert!(matches!(DimTs::new(c), Err(Error::Config(_))));
        assert_eq!(small(0).lag_offsets(), vec![0, 2, 4]);
        assert_eq!(ModelConfig::new(24, 2).lag_offsets(), vec![0, 4, 8, 12]);
    }

    #[test]
    fn every_parameter_gets_a_finite_gradient() {
        let mut m = DimTs::new(small(22)).unwrap();
        randomize(&mut m, 23, 0.3);
        m.set_channel_order(vec![1, 2, 0]).unwrap();
        let x = random_array(&mut ChaCha8Rng::seed_from_u64(24), &[8, 3]);
        let mut g = Graph::new();
        let p = m.params().bind(&mut g, true);
        let xv = g.constant(x.clone());
        let out = m.forward(&mut g, &p, xv, 4).unwrap();
        let xc = g.constant(x);
        let d = g.sub(out, xc).unwrap();
        let sq = g.square(d);
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        for (i, name) in m.params().names().iter().enumerate() {
            let gr = g.grad(p.vars()[i]);
            assert!(gr.all_finite(), "{name}");
            assert!(
                gr.data().iter().any(|&v| v != 0.0),
                "{name} has zero gradient"
            );
        }
    }
}
