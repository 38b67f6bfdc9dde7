//! Gated delta block: pre-norm residual attention module (locality mix,
//! delta-rule memory, gated output fusion) followed by a pre-norm SwiGLU MLP.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::array::{self, NumArray};
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::kernel::{self, GateTrace, UpdateRule};
use crate::locality::{self, Coord, GridLayout};
use crate::par::Exec;

/// Declares a parameter record generic over its leaf type, with by-name
/// traversal helpers.
macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = NumArray> {
            $($(#[$fmeta])* pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn try_map<U, E>(&self, mut f: impl FnMut(&'static str, &T) -> Result<U, E>) -> Result<$name<U>, E> {
                Ok($name { $($field: f(stringify!($field), &self.$field)?,)* })
            }

            pub fn fields(&self) -> Vec<(&'static str, &T)> {
                vec![$((stringify!($field), &self.$field),)*]
            }

            pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$((stringify!($field), &mut self.$field),)*]
            }
        }
    };
}
pub(crate) use param_struct;

param_struct! {
    /// Learnable arrays of one block.
    BlockParams {
        /// Pre-attention RMS gain `[d]`.
        rms_gain_attn,
        /// Pre-MLP RMS gain `[d]`.
        rms_gain_mlp,
        /// Fill value for empty and out-of-grid cells `[d]`.
        pad_token,
        /// Depthwise 2-D kernels `[d × kh × kw]`.
        conv2d,
        /// Local-branch mixing scalar `[1]`; enters as `tanh(λ)`.
        lambda,
        /// Local projection `[d × heads·d_v]` and bias.
        w_local,
        b_local,
        w_q,
        w_k,
        w_v,
        /// Short causal convolutions `[heads·d_k × w]`.
        conv_q,
        conv_k,
        conv_v,
        w_alpha,
        b_alpha,
        w_beta,
        b_beta,
        /// Output fusion gate `[d × heads·d_v]` and bias.
        w_gate,
        b_gate,
        /// Attention output projection `[heads·d_v × d]`.
        w_out,
        /// SwiGLU gate path `[d × d_ff]`.
        w_mlp_gate,
        /// SwiGLU value path `[d × d_ff]`.
        w_mlp_up,
        /// SwiGLU down projection `[d_ff × d]`.
        w_mlp_down,
    }
}

/// Shape and ablation settings shared by every block of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub short_conv: usize,
    pub chunk_size: usize,
    pub rms_eps: f64,
    /// 2-D locality branch and its fusion path.
    pub local: bool,
    /// Learnable retention gate; when off `α ≡ 1`.
    pub gated: bool,
    /// Removal term of the delta rule; when off the write is purely additive.
    pub delta: bool,
    pub exec: Exec,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            head_dim: 32,
            d_ff: 512,
            conv_kernel: 3,
            short_conv: 4,
            chunk_size: 64,
            rms_eps: 1e-6,
            local: true,
            gated: true,
            delta: true,
            exec: Exec::default(),
        }
    }
}

impl BlockConfig {
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.head_dim == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_model, heads, head_dim and d_ff must be positive".into()));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        if self.short_conv == 0 || self.chunk_size == 0 {
            return Err(Error::Config("short_conv and chunk_size must be at least 1".into()));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::Config("rms_eps must be positive".into()));
        }
        Ok(())
    }

    fn rule(&self) -> UpdateRule {
        if self.delta {
            UpdateRule::GatedDelta
        } else {
            UpdateRule::Additive
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> NumArray {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    NumArray::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Delta kernel at the centre tap (2-D) or the current position (1-D),
/// plus N(0, 0.01²) noise.
fn near_identity(rng: &mut impl Rng, channels: usize, taps: usize, centre: usize) -> NumArray {
    let noise = Normal::new(0.0, 0.01).expect("valid normal");
    let mut out = NumArray::zeros(&[channels, taps]);
    for c in 0..channels {
        for t in 0..taps {
            let base = if t == centre { 1.0 } else { 0.0 };
            out.set2(c, t, base + noise.sample(rng));
        }
    }
    out
}

impl BlockParams {
    pub fn init(cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let (d, inner, ff, heads) = (cfg.d_model, cfg.inner(), cfg.d_ff, cfg.heads);
        let kk = cfg.conv_kernel * cfg.conv_kernel;
        let conv2d = near_identity(rng, d, kk, kk / 2)
            .reshape(vec![d, cfg.conv_kernel, cfg.conv_kernel])
            .expect("kernel shape");
        Self {
            rms_gain_attn: NumArray::filled(&[d], 1.0),
            rms_gain_mlp: NumArray::filled(&[d], 1.0),
            pad_token: NumArray::zeros(&[d]),
            conv2d,
            lambda: NumArray::zeros(&[1]),
            w_local: NumArray::zeros(&[d, inner]),
            b_local: NumArray::zeros(&[inner]),
            w_q: uniform(rng, &[d, inner], d),
            w_k: uniform(rng, &[d, inner], d),
            w_v: uniform(rng, &[d, inner], d),
            conv_q: near_identity(rng, inner, cfg.short_conv, cfg.short_conv - 1),
            conv_k: near_identity(rng, inner, cfg.short_conv, cfg.short_conv - 1),
            conv_v: near_identity(rng, inner, cfg.short_conv, cfg.short_conv - 1),
            w_alpha: uniform(rng, &[d, heads], d),
            b_alpha: NumArray::zeros(&[heads]),
            w_beta: uniform(rng, &[d, heads], d),
            b_beta: NumArray::zeros(&[heads]),
            w_gate: NumArray::zeros(&[d, inner]),
            b_gate: NumArray::zeros(&[inner]),
            w_out: uniform(rng, &[inner, d], inner),
            w_mlp_gate: uniform(rng, &[d, ff], d),
            w_mlp_up: uniform(rng, &[d, ff], d),
            w_mlp_down: uniform(rng, &[ff, d], ff),
        }
    }

    /// Every array zero except the RMS gains (which stay at one).
    pub fn zeros_like(cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let mut p = Self::init(cfg, rng);
        for (name, a) in p.fields_mut() {
            if !name.starts_with("rms_gain") {
                a.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        p
    }
}

/// Inverted dropout driven by an explicit random stream.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn rand::RngCore,
}

impl Dropout<'_> {
    pub(crate) fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tape.constant(NumArray::from_parts(shape, mask));
        tape.mul(x, m)
    }
}

/// Per-token RMS normalization with a learned gain.
pub fn rms_norm(x: &NumArray, gain: &NumArray, eps: f64) -> Result<NumArray> {
    let mut tape = Tape::inference();
    let (xv, gv) = (tape.constant(x.clone()), tape.constant(gain.clone()));
    let y = tape.rms_norm(xv, gv, eps)?;
    Ok(tape.value(y).clone())
}

/// `(silu(x W_gate) ⊙ (x W_up)) W_down`.
pub fn gated_mlp(x: &NumArray, w_gate: &NumArray, w_up: &NumArray, w_down: &NumArray) -> Result<NumArray> {
    let g = x.matmul(w_gate)?.map(array::silu);
    let u = x.matmul(w_up)?;
    let data = g.data().iter().zip(u.data()).map(|(a, b)| a * b).collect();
    NumArray::from_parts(g.shape().to_vec(), data).matmul(w_down)
}

fn gated_mlp_tape(tape: &mut Tape, x: Var, p: &BlockParams<Var>) -> Result<Var> {
    let g = tape.matmul(x, p.w_mlp_gate)?;
    let g = tape.silu(g);
    let u = tape.matmul(x, p.w_mlp_up)?;
    let h = tape.mul(g, u)?;
    tape.matmul(h, p.w_mlp_down)
}

/// Tape handles of the gates produced by one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockGates {
    pub alpha: Var,
    pub beta: Var,
    pub fusion: Var,
}

impl BlockGates {
    pub fn trace(&self, tape: &Tape) -> GateTrace {
        GateTrace {
            alpha: tape.value(self.alpha).clone(),
            beta: tape.value(self.beta).clone(),
            fusion: Some(tape.value(self.fusion).clone()),
        }
    }
}

fn attention_module(
    tape: &mut Tape,
    x: Var,
    layout: &GridLayout,
    p: &BlockParams<Var>,
    cfg: &BlockConfig,
) -> Result<(Var, BlockGates)> {
    let n = tape.value(x).rows();
    let heads = cfg.heads;

    let (h, z_local) = if cfg.local {
        let grid = tape.scatter_grid(x, p.pad_token, &layout.cells, layout.n_cells())?;
        let conv = tape.dwconv2d(grid, p.conv2d, p.pad_token, layout.height, layout.width)?;
        let z_local = tape.gather_rows(conv, &layout.cells)?;
        let mix = tape.tanh(p.lambda);
        let scaled = tape.mul(z_local, mix)?;
        (tape.add(x, scaled)?, Some(z_local))
    } else {
        (x, None)
    };

    let q = tape.matmul(h, p.w_q)?;
    let q = tape.causal_conv1d(q, p.conv_q)?;
    let k = tape.matmul(h, p.w_k)?;
    let k = tape.causal_conv1d(k, p.conv_k)?;
    let k = tape.l2_normalize_groups(k, cfg.head_dim, 1e-12)?;
    let v = tape.matmul(h, p.w_v)?;
    let v = tape.causal_conv1d(v, p.conv_v)?;

    let alpha = if cfg.gated {
        let a = tape.linear(h, p.w_alpha, Some(p.b_alpha))?;
        tape.sigmoid(a)
    } else {
        tape.constant(NumArray::filled(&[n, heads], 1.0))
    };
    let beta = tape.linear(h, p.w_beta, Some(p.b_beta))?;
    let beta = tape.sigmoid(beta);

    let global = kernel::scan_on_tape(tape, q, k, v, alpha, beta, heads, cfg.chunk_size, cfg.rule(), cfg.exec)?;

    let gate = tape.linear(h, p.w_gate, Some(p.b_gate))?;
    let gate = tape.sigmoid(gate);
    let gated_global = tape.mul(gate, global)?;
    let fused = match z_local {
        Some(z_local) => {
            let h_local = tape.linear(z_local, p.w_local, Some(p.b_local))?;
            let rest = tape.one_minus(gate);
            let local_part = tape.mul(rest, h_local)?;
            tape.add(gated_global, local_part)?
        }
        None => gated_global,
    };
    let out = tape.matmul(fused, p.w_out)?;
    Ok((out, BlockGates { alpha, beta, fusion: gate }))
}

/// One block on a tape. `dropout` is only applied when present.
pub fn block_forward_tape(
    tape: &mut Tape,
    z: Var,
    layout: &GridLayout,
    p: &BlockParams<Var>,
    cfg: &BlockConfig,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Var, BlockGates)> {
    let x = tape.rms_norm(z, p.rms_gain_attn, cfg.rms_eps)?;
    let (mut attn, gates) = attention_module(tape, x, layout, p, cfg)?;
    if let Some(d) = dropout.as_mut() {
        attn = d.apply(tape, attn)?;
    }
    let u = tape.add(z, attn)?;
    let y = tape.rms_norm(u, p.rms_gain_mlp, cfg.rms_eps)?;
    let mut mlp = gated_mlp_tape(tape, y, p)?;
    if let Some(d) = dropout.as_mut() {
        mlp = d.apply(tape, mlp)?;
    }
    Ok((tape.add(u, mlp)?, gates))
}

/// Sequential composition of blocks on a tape.
pub fn stack_forward_tape(
    tape: &mut Tape,
    mut z: Var,
    layout: &GridLayout,
    blocks: &[BlockParams<Var>],
    cfg: &BlockConfig,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Var, Vec<BlockGates>)> {
    if blocks.is_empty() {
        return Err(Error::EmptyStack);
    }
    let mut gates = Vec::with_capacity(blocks.len());
    for p in blocks {
        let (out, g) = block_forward_tape(tape, z, layout, p, cfg, dropout)?;
        z = out;
        gates.push(g);
    }
    Ok((z, gates))
}

/// Evaluate one block on plain arrays. Coordinates are shifted to the
/// origin before gridding. With `dropout = None` the pass is deterministic.
pub fn block_forward(
    z: &NumArray,
    coords: &[Coord],
    params: &BlockParams,
    cfg: &BlockConfig,
    dropout: Option<Dropout<'_>>,
) -> Result<(NumArray, GateTrace)> {
    let (out, mut traces) = stack_forward(z, coords, std::slice::from_ref(params), cfg, dropout)?;
    Ok((out, traces.remove(0)))
}

pub fn stack_forward(
    z: &NumArray,
    coords: &[Coord],
    blocks: &[BlockParams],
    cfg: &BlockConfig,
    mut dropout: Option<Dropout<'_>>,
) -> Result<(NumArray, Vec<GateTrace>)> {
    if z.rows() != coords.len() {
        return Err(Error::LengthMismatch { what: "coords", got: coords.len(), expected: z.rows() });
    }
    let layout = GridLayout::new(&locality::normalize_coords(coords))?;
    let mut tape = Tape::inference();
    let zv = tape.constant(z.clone());
    let vars: Vec<BlockParams<Var>> = blocks
        .iter()
        .map(|b| b.try_map(|_, a| Ok::<_, Error>(tape.constant(a.clone()))))
        .collect::<Result<_>>()?;
    let (out, gates) = stack_forward_tape(&mut tape, zv, &layout, &vars, cfg, &mut dropout)?;
    Ok((tape.value(out).clone(), gates.iter().map(|g| g.trace(&tape)).collect()))
}
