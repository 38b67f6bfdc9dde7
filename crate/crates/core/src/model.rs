//! Slide-level MIL model: embedding, optional z-score, block stack,
//! aggregator and task heads, plus the pooling baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::{self, NumArray};
use crate::block::{self, param_struct, BlockConfig, BlockGates, BlockParams, Dropout};
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::kernel::GateTrace;
use crate::locality::{self, Coord, GridLayout};

/// How per-patch representations collapse into one slide vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregator {
    /// Gated attention pooling; exposes per-patch weights.
    Attention,
    Mean,
    Max,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Attention => "attention",
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Aggregator::Attention),
            "mean" => Ok(Aggregator::Mean),
            "max" => Ok(Aggregator::Max),
            other => Err(Error::Config(format!("unknown aggregator {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Survival,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Survival => "survival",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "survival" => Ok(TaskKind::Survival),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Patch feature dimension `c`.
    pub in_dim: usize,
    pub block: BlockConfig,
    /// Number of blocks; 0 gives the pooling baselines.
    pub layers: usize,
    pub aggregator: Aggregator,
    /// Hidden width of the gated-attention scorer.
    pub attn_dim: usize,
    pub zscore: bool,
    pub task: TaskKind,
    pub n_classes: usize,
    pub n_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_dim: 1024,
            block: BlockConfig::default(),
            layers: 1,
            aggregator: Aggregator::Attention,
            attn_dim: 128,
            zscore: false,
            task: TaskKind::Classification,
            n_classes: 2,
            n_bins: 4,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.block.d_model
    }

    pub fn out_dim(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.n_classes,
            TaskKind::Survival => self.n_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.in_dim == 0 || self.attn_dim == 0 {
            return Err(Error::Config("in_dim and attn_dim must be positive".into()));
        }
        match self.task {
            TaskKind::Classification if self.n_classes < 2 => {
                Err(Error::Config(format!("n_classes must be at least 2, got {}", self.n_classes)))
            }
            TaskKind::Survival if self.n_bins == 0 => Err(Error::Config("n_bins must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// Supervision attached to a bag.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// `time` in months; `event` true when death was observed.
    Survival { time: f64, event: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    pub id: String,
    /// `[N × c]`.
    pub features: NumArray,
    pub coords: Vec<Coord>,
    pub target: Target,
    /// Ground-truth witnesses of synthetic bags; never read by the model.
    pub witness: Option<Vec<bool>>,
}

impl PatchBag {
    pub fn new(id: impl Into<String>, features: NumArray, coords: Vec<Coord>, target: Target) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "bag features",
                left: features.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        if features.rows() == 0 {
            return Err(Error::EmptyBag);
        }
        if coords.len() != features.rows() {
            return Err(Error::LengthMismatch { what: "coords", got: coords.len(), expected: features.rows() });
        }
        if let Target::Survival { time, .. } = target {
            if !(time > 0.0) || !time.is_finite() {
                return Err(Error::Invalid(format!("survival time must be positive, got {time}")));
            }
        }
        Ok(Self { id: id.into(), features, coords, target, witness: None })
    }

    pub fn with_witness(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(Error::LengthMismatch { what: "witness mask", got: mask.len(), expected: self.len() });
        }
        self.witness = Some(mask);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self) -> Option<usize> {
        match self.target {
            Target::Class(c) => Some(c),
            Target::Survival { .. } => None,
        }
    }

    /// Restrict to `indices`, keeping their order. Coordinates are kept
    /// as-is; the grid is re-normalized when the sub-bag is gridded.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptySubset);
        }
        let c = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::KOutOfRange { k: i, n: self.len() });
            }
            data.extend_from_slice(self.features.row(i));
        }
        Ok(Self {
            id: self.id.clone(),
            features: NumArray::from_parts(vec![indices.len(), c], data),
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            target: self.target.clone(),
            witness: self.witness.as_ref().map(|w| indices.iter().map(|&i| w[i]).collect()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideRepr {
    pub vector: Vec<f64>,
    /// Softmax weights over patches; present only for attention pooling.
    pub attention: Option<Vec<f64>>,
}

/// Discrete-time survival bins. `boundaries` are interior cut points, so
/// there are `boundaries.len() + 1` bins.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalHead {
    boundaries: Vec<f64>,
}

impl SurvivalHead {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::Invalid("survival bin boundaries must be positive".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("survival bin boundaries must be strictly increasing".into()));
        }
        Ok(Self { boundaries })
    }

    /// Cut points at the quantiles `b/n_bins` of the observed-event times
    /// (all times when nothing was observed). Repeated quantiles are merged,
    /// which may yield fewer bins than requested.
    pub fn from_times(records: &[(f64, bool)], n_bins: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("survival records"));
        }
        let mut times: Vec<f64> = records.iter().filter(|r| r.1).map(|r| r.0).collect();
        if times.is_empty() {
            times = records.iter().map(|r| r.0).collect();
        }
        times.sort_by(f64::total_cmp);
        let mut cuts: Vec<f64> = Vec::new();
        for b in 1..n_bins {
            let pos = (b as f64 / n_bins as f64) * (times.len() - 1) as f64;
            let (lo, frac) = (pos.floor() as usize, pos.fract());
            let hi = (lo + 1).min(times.len() - 1);
            let q = times[lo] + frac * (times[hi] - times[lo]);
            if cuts.last().is_none_or(|&last| q > last) {
                cuts.push(q);
            }
        }
        Self::new(cuts)
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn n_bins(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Number of cut points at or below `time`.
    pub fn bin_of(&self, time: f64) -> usize {
        self.boundaries.iter().take_while(|&&b| b <= time).count()
    }
}

param_struct! {
    /// Gated-attention scorer `wᵀ(tanh(V z) ⊙ σ(U z))`.
    AttnPoolParams { v_w, v_b, u_w, u_b, w }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = NumArray> {
    pub embed_w: T,
    pub embed_b: T,
    pub blocks: Vec<BlockParams<T>>,
    pub pool: Option<AttnPoolParams<T>>,
    pub head_w: T,
    pub head_b: T,
}

impl<T> ModelParams<T> {
    /// Visits arrays in [`ModelParams::named`] order.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        let embed_w = f("embed_w", &self.embed_w)?;
        let embed_b = f("embed_b", &self.embed_b)?;
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.try_map(|name, a| f(&format!("block{i}.{name}"), a)))
            .collect::<Result<_, E>>()?;
        let pool = match &self.pool {
            Some(p) => Some(p.try_map(|name, a| f(&format!("pool.{name}"), a))?),
            None => None,
        };
        Ok(ModelParams {
            embed_w,
            embed_b,
            blocks,
            pool,
            head_w: f("head_w", &self.head_w)?,
            head_b: f("head_b", &self.head_b)?,
        })
    }

    /// Every array with its qualified name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embed_w".to_string(), &self.embed_w), ("embed_b".to_string(), &self.embed_b)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.fields().into_iter().map(|(n, a)| (format!("block{i}.{n}"), a)));
        }
        if let Some(p) = &self.pool {
            out.extend(p.fields().into_iter().map(|(n, a)| (format!("pool.{n}"), a)));
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed_w, &mut self.embed_b];
        for b in &mut self.blocks {
            out.extend(b.fields_mut().into_iter().map(|(_, a)| a));
        }
        if let Some(p) = &mut self.pool {
            out.extend(p.fields_mut().into_iter().map(|(_, a)| a));
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> NumArray {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    NumArray::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (c, d, a, out) = (cfg.in_dim, cfg.d_model(), cfg.attn_dim, cfg.out_dim());
        let embed_w = uniform(rng, &[c, d], c);
        let blocks = (0..cfg.layers).map(|_| BlockParams::init(&cfg.block, rng)).collect();
        let pool = (cfg.aggregator == Aggregator::Attention).then(|| AttnPoolParams {
            v_w: uniform(rng, &[d, a], d),
            v_b: NumArray::zeros(&[a]),
            u_w: uniform(rng, &[d, a], d),
            u_b: NumArray::zeros(&[a]),
            w: uniform(rng, &[a, 1], a),
        });
        Self {
            embed_w,
            embed_b: NumArray::zeros(&[d]),
            blocks,
            pool,
            head_w: uniform(rng, &[d, out], d),
            head_b: NumArray::zeros(&[out]),
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, a)| a.all_finite())
    }

    /// Order-sensitive 64-bit FNV-1a over every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, a) in self.named() {
            for x in a.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Class probabilities or per-bin hazards for one bag.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Class(Vec<f64>),
    Survival { hazards: Vec<f64>, risk: f64 },
}

impl Prediction {
    /// Argmax class, ties toward the lowest index.
    pub fn class(&self) -> Option<usize> {
        match self {
            Prediction::Class(p) => Some(argmax(p)),
            Prediction::Survival { .. } => None,
        }
    }

    pub fn probs(&self) -> Option<&[f64]> {
        match self {
            Prediction::Class(p) => Some(p),
            Prediction::Survival { .. } => None,
        }
    }

    pub fn risk(&self) -> Option<f64> {
        match self {
            Prediction::Class(_) => None,
            Prediction::Survival { risk, .. } => Some(*risk),
        }
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Row permutation sorting rows lexicographically; reductions in this order
/// are independent of the input order.
fn canonical_order(x: &NumArray) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Per-dimension `(x − mean)/std` across patches, population std floored
/// at 1e−6.
pub fn zscore(x: &NumArray) -> Result<NumArray> {
    let (n, c) = (x.rows(), x.cols());
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    let order = canonical_order(x);
    let mut out = x.clone();
    for j in 0..c {
        let mean = order.iter().map(|&i| x.get2(i, j)).sum::<f64>() / n as f64;
        let var = order.iter().map(|&i| (x.get2(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-6);
        for i in 0..n {
            out.set2(i, j, (x.get2(i, j) - mean) / std);
        }
    }
    Ok(out)
}

fn bag_features(bag: &PatchBag, zscore_flag: bool) -> Result<NumArray> {
    if bag.is_empty() {
        return Err(Error::EmptyBag);
    }
    if zscore_flag {
        zscore(&bag.features)
    } else {
        Ok(bag.features.clone())
    }
}

/// Optional z-score, then the affine patch embedding.
pub fn embed(bag: &PatchBag, w_e: &NumArray, b_e: &NumArray, zscore_flag: bool) -> Result<NumArray> {
    let mut tape = Tape::inference();
    let x = tape.constant(bag_features(bag, zscore_flag)?);
    let (w, b) = (tape.constant(w_e.clone()), tape.constant(b_e.clone()));
    let z = tape.linear(x, w, Some(b))?;
    Ok(tape.value(z).clone())
}

fn attention_tape(tape: &mut Tape, z: Var, p: &AttnPoolParams<Var>) -> Result<(Var, Var)> {
    let n = tape.value(z).rows();
    let a = tape.linear(z, p.v_w, Some(p.v_b))?;
    let a = tape.tanh(a);
    let g = tape.linear(z, p.u_w, Some(p.u_b))?;
    let g = tape.sigmoid(g);
    let h = tape.mul(a, g)?;
    let s = tape.matmul(h, p.w)?;
    let s = tape.reshape(s, &[1, n])?;
    let att = tape.softmax_rows(s);
    let slide = tape.matmul(att, z)?;
    Ok((slide, att))
}

fn pool_tape(tape: &mut Tape, z: Var, mode: Aggregator) -> Result<Var> {
    let zv = tape.value(z).clone();
    let (n, d) = (zv.rows(), zv.cols());
    match mode {
        Aggregator::Mean => {
            let sorted = tape.gather_rows(z, &canonical_order(&zv))?;
            let w = tape.constant(NumArray::filled(&[1, n], 1.0 / n as f64));
            tape.matmul(w, sorted)
        }
        Aggregator::Max => {
            let picks = (0..d)
                .map(|j| {
                    let i = (0..n).fold(0, |best, i| if zv.get2(i, j) > zv.get2(best, j) { i } else { best });
                    tape.slice(z, i, 1, j, 1)
                })
                .collect::<Result<Vec<_>>>()?;
            tape.concat_cols(&picks)
        }
        Aggregator::Attention => Err(Error::Invalid("attention pooling needs scorer parameters".into())),
    }
}

/// Gated-attention pooling of `z_out` `[N × d]`.
pub fn aggregate_attention(z_out: &NumArray, params: &AttnPoolParams) -> Result<SlideRepr> {
    let mut tape = Tape::inference();
    let z = tape.constant(z_out.clone());
    let p = params.try_map(|_, a| Ok::<_, Error>(tape.constant(a.clone())))?;
    let (slide, att) = attention_tape(&mut tape, z, &p)?;
    Ok(SlideRepr {
        vector: tape.value(slide).data().to_vec(),
        attention: Some(tape.value(att).data().to_vec()),
    })
}

/// Coordinate-wise max or mean over patches.
pub fn aggregate_pool(z_out: &NumArray, mode: Aggregator) -> Result<SlideRepr> {
    if z_out.rows() == 0 {
        return Err(Error::EmptyBag);
    }
    let mut tape = Tape::inference();
    let z = tape.constant(z_out.clone());
    let slide = pool_tape(&mut tape, z, mode)?;
    Ok(SlideRepr { vector: tape.value(slide).data().to_vec(), attention: None })
}

fn head_logits(repr: &SlideRepr, head_w: &NumArray, head_b: &NumArray) -> Result<Vec<f64>> {
    let x = NumArray::from_parts(vec![1, repr.vector.len()], repr.vector.clone());
    let mut logits = x.matmul(head_w)?.into_data();
    if head_b.len() != logits.len() {
        return Err(Error::ShapeMismatch { op: "head bias", left: vec![logits.len()], right: head_b.shape().to_vec() });
    }
    logits.iter_mut().zip(head_b.data()).for_each(|(l, b)| *l += b);
    Ok(logits)
}

/// Softmax class probabilities.
pub fn classify(repr: &SlideRepr, head_w: &NumArray, head_b: &NumArray) -> Result<Vec<f64>> {
    Ok(array::softmax(&head_logits(repr, head_w, head_b)?))
}

/// `−log p_label`, probabilities floored at 1e−12.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(Error::InvalidClass { class: label, n_classes: probs.len() })?;
    Ok(-p.max(1e-12).ln())
}

pub fn hazards(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&x| array::sigmoid(x)).collect()
}

/// `−Σ_b S(b)` with `S(b) = Π_{τ≤b}(1 − h_τ)`.
pub fn risk_score(hazards: &[f64]) -> f64 {
    let mut surv = 1.0;
    let mut total = 0.0;
    for h in hazards {
        surv *= 1.0 - h;
        total += surv;
    }
    -total
}

/// Discrete-time hazard negative log-likelihood from logits, using
/// `log h = −softplus(−x)` and `log(1−h) = −softplus(x)`.
pub fn hazard_nll(logits: &[f64], bin: usize, event: bool) -> Result<f64> {
    if bin >= logits.len() {
        return Err(Error::KOutOfRange { k: bin, n: logits.len() });
    }
    let survive: f64 = logits[..bin].iter().map(|&x| array::softplus(x)).sum();
    let loss = if event {
        array::softplus(-logits[bin]) + survive
    } else {
        survive + array::softplus(logits[bin])
    };
    if !loss.is_finite() {
        return Err(Error::Invalid(format!("non-finite survival loss {loss}: saturated hazards")));
    }
    Ok(loss)
}

pub fn survival_nll(
    repr: &SlideRepr,
    time: f64,
    event: bool,
    head_w: &NumArray,
    head_b: &NumArray,
    head: &SurvivalHead,
) -> Result<f64> {
    let logits = head_logits(repr, head_w, head_b)?;
    if logits.len() != head.n_bins() {
        return Err(Error::LengthMismatch { what: "survival logits", got: logits.len(), expected: head.n_bins() });
    }
    hazard_nll(&logits, head.bin_of(time), event)
}

/// Everything one forward pass exposes.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub prediction: Prediction,
    pub repr: SlideRepr,
    pub gates: Vec<GateTrace>,
}

/// Tape handles of one forward pass.
pub struct TapeForward {
    pub logits: Var,
    pub slide: Var,
    pub attention: Option<Var>,
    pub gates: Vec<BlockGates>,
}

/// Record the model on `tape`.
pub fn forward_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    bag: &PatchBag,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<TapeForward> {
    let x = tape.constant(bag_features(bag, cfg.zscore)?);
    let mut z = tape.linear(x, p.embed_w, Some(p.embed_b))?;
    let mut gates = Vec::new();
    if !p.blocks.is_empty() {
        let layout = GridLayout::new(&locality::normalize_coords(&bag.coords))?;
        let (out, g) = block::stack_forward_tape(tape, z, &layout, &p.blocks, &cfg.block, dropout)?;
        z = out;
        gates = g;
    }
    let (slide, attention) = match (cfg.aggregator, &p.pool) {
        (Aggregator::Attention, Some(pool)) => {
            let (s, a) = attention_tape(tape, z, pool)?;
            (s, Some(a))
        }
        (Aggregator::Attention, None) => return Err(Error::Invalid("attention aggregator without scorer parameters".into())),
        (mode, _) => (pool_tape(tape, z, mode)?, None),
    };
    let logits = tape.linear(slide, p.head_w, Some(p.head_b))?;
    Ok(TapeForward { logits, slide, attention, gates })
}

/// Scalar training loss of a recorded forward pass.
pub fn loss_tape(tape: &mut Tape, logits: Var, target: &Target, survival: Option<&SurvivalHead>) -> Result<Var> {
    match *target {
        Target::Class(label) => tape.cross_entropy_logits(logits, label),
        Target::Survival { time, event } => {
            let head = survival.ok_or_else(|| Error::Invalid("survival target without bin boundaries".into()))?;
            let n = tape.value(logits).len();
            if n != head.n_bins() {
                return Err(Error::LengthMismatch { what: "survival logits", got: n, expected: head.n_bins() });
            }
            let bin = head.bin_of(time);
            // −log(1−h) = softplus(x); −log h = softplus(−x).
            let mut terms = Vec::new();
            if bin > 0 {
                let before = tape.slice(logits, 0, 1, 0, bin)?;
                let sp = tape.softplus(before);
                terms.push(tape.sum(sp));
            }
            let at = tape.slice(logits, 0, 1, bin, 1)?;
            let last = if event {
                let neg = tape.scale(at, -1.0);
                tape.softplus(neg)
            } else {
                tape.softplus(at)
            };
            terms.push(tape.sum(last));
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = tape.add(loss, t)?;
            }
            Ok(loss)
        }
    }
}

/// A configured model with its parameters and, for survival, its bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub survival: Option<SurvivalHead>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng);
        Ok(Self { config, params, survival: None })
    }

    pub fn with_survival(mut self, head: SurvivalHead) -> Result<Self> {
        if head.n_bins() != self.config.n_bins {
            return Err(Error::LengthMismatch { what: "survival bins", got: head.n_bins(), expected: self.config.n_bins });
        }
        self.survival = Some(head);
        Ok(self)
    }

    fn prediction(&self, logits: &[f64]) -> Prediction {
        match self.config.task {
            TaskKind::Classification => Prediction::Class(array::softmax(logits)),
            TaskKind::Survival => {
                let h = hazards(logits);
                let risk = risk_score(&h);
                Prediction::Survival { hazards: h, risk }
            }
        }
    }

    /// Deterministic inference pass.
    pub fn forward(&self, bag: &PatchBag) -> Result<ForwardOutput> {
        let mut tape = Tape::inference();
        let p = self.params.try_map(|_, a| Ok::<_, Error>(tape.constant(a.clone())))?;
        let out = forward_tape(&mut tape, &self.config, &p, bag, &mut None)?;
        let logits = tape.value(out.logits).data().to_vec();
        Ok(ForwardOutput {
            prediction: self.prediction(&logits),
            repr: SlideRepr {
                vector: tape.value(out.slide).data().to_vec(),
                attention: out.attention.map(|a| tape.value(a).data().to_vec()),
            },
            gates: out.gates.iter().map(|g| g.trace(&tape)).collect(),
        })
    }

    pub fn predict(&self, bag: &PatchBag) -> Result<Prediction> {
        Ok(self.forward(bag)?.prediction)
    }

    /// Loss on `bag` and its gradient for every parameter array.
    pub fn loss_and_grad(&self, bag: &PatchBag, dropout: Option<Dropout<'_>>) -> Result<(f64, ModelParams)> {
        let mut tape = Tape::new();
        let p = self.params.try_map(|_, a| Ok::<_, Error>(tape.leaf(a.clone())))?;
        let mut dropout = dropout;
        let out = forward_tape(&mut tape, &self.config, &p, bag, &mut dropout)?;
        let loss = loss_tape(&mut tape, out.logits, &bag.target, self.survival.as_ref())?;
        let grads = tape.backward(loss)?;
        let g = p.try_map(|_, &v| Ok::<_, Error>(grads.get(v)))?;
        Ok((tape.value(loss).item(), g))
    }

    pub fn loss(&self, bag: &PatchBag) -> Result<f64> {
        let mut tape = Tape::inference();
        let p = self.params.try_map(|_, a| Ok::<_, Error>(tape.constant(a.clone())))?;
        let out = forward_tape(&mut tape, &self.config, &p, bag, &mut None)?;
        let loss = loss_tape(&mut tape, out.logits, &bag.target, self.survival.as_ref())?;
        Ok(tape.value(loss).item())
    }
}

/// Standalone inference entry point.
pub fn full_forward(bag: &PatchBag, model: &Model) -> Result<ForwardOutput> {
    model.forward(bag)
}
