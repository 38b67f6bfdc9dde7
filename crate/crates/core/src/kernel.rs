//! Gated delta-rule memory: gates, the single-token update in its
//! three-step and compact forms, and full-sequence scans.
//!
//! Each head keeps a memory `S` of shape `d_v × d_k` mapping keys to values.
//! For a unit key `k_t`, value `v_t` and gates `α_t, β_t`:
//!
//! ```text
//! v_old = α_t · S_{t-1} k_t
//! v_new = β_t · v_t + (1 − β_t) · v_old
//! S_t   = α_t · S_{t-1} − v_old k_tᵀ + v_new k_tᵀ
//!       = S_{t-1} · α_t (I − β_t k_t k_tᵀ) + β_t v_t k_tᵀ
//! o_t   = S_t q_t
//! ```

use crate::array::{self, NumArray};
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::par::{self, Exec};

/// Tolerance on `‖k‖ − 1` accepted by the checked entry points.
pub const KEY_NORM_TOL: f64 = 1e-6;

/// One head's key→value memory, `d_v × d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    s: NumArray,
}

impl MemoryState {
    pub fn zeros(d_v: usize, d_k: usize) -> Self {
        Self { s: NumArray::zeros(&[d_v, d_k]) }
    }

    pub fn from_array(s: NumArray) -> Result<Self> {
        if s.shape().len() != 2 {
            return Err(Error::ShapeMismatch { op: "memory_state", left: s.shape().to_vec(), right: vec![] });
        }
        Ok(Self { s })
    }

    pub fn d_v(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn d_k(&self) -> usize {
        self.s.shape()[1]
    }

    pub fn matrix(&self) -> &NumArray {
        &self.s
    }

    /// `S · x` for a key-space vector `x`.
    pub fn read(&self, x: &[f64]) -> Vec<f64> {
        let dk = self.d_k();
        self.s.data().chunks(dk).map(|row| dot(row, x)).collect()
    }
}

/// Per-token gates, one scalar pair per head.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    /// Retention gate, `N × heads`.
    pub alpha: NumArray,
    /// Update gate, `N × heads`.
    pub beta: NumArray,
    /// Output fusion gate rows, `N × width`, when recorded.
    pub fusion: Option<NumArray>,
}

impl GateTrace {
    pub fn len(&self) -> usize {
        self.alpha.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn heads(&self) -> usize {
        self.alpha.cols()
    }
}

/// Query, key and value sequences laid out `N × heads × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvSequences {
    pub q: NumArray,
    pub k: NumArray,
    pub v: NumArray,
}

impl QkvSequences {
    pub fn new(q: NumArray, k: NumArray, v: NumArray) -> Result<Self> {
        for (what, a) in [("q", &q), ("k", &k), ("v", &v)] {
            if a.shape().len() != 3 {
                return Err(Error::ShapeMismatch { op: "qkv", left: a.shape().to_vec(), right: vec![0, 0, 0] });
            }
            if a.shape()[0] != q.shape()[0] || a.shape()[1] != q.shape()[1] {
                return Err(Error::LengthMismatch { what, got: a.shape()[0], expected: q.shape()[0] });
            }
        }
        if q.shape()[2] != k.shape()[2] {
            return Err(Error::ShapeMismatch { op: "qkv", left: q.shape().to_vec(), right: k.shape().to_vec() });
        }
        Ok(Self { q, k, v })
    }

    pub fn len(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn d_k(&self) -> usize {
        self.q.shape()[2]
    }

    pub fn d_v(&self) -> usize {
        self.v.shape()[2]
    }
}

/// Memory write rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UpdateRule {
    /// Remove the value stored under `k_t`, then write the blended value.
    #[default]
    GatedDelta,
    /// Plain additive write `S_t = α_t S_{t-1} + β_t v_t k_tᵀ` (no removal).
    Additive,
}

/// Outputs `N × heads × d_v` and final per-head states.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput {
    pub outputs: NumArray,
    pub states: Vec<MemoryState>,
}

/// Result of a single [`delta_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaStep {
    pub state: MemoryState,
    pub v_old: Vec<f64>,
    pub v_new: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `α = σ(H W_α + b_α)`, `β = σ(H W_β + b_β)`, one pair per head.
pub fn compute_gates(
    h: &NumArray,
    w_beta: &NumArray,
    w_alpha: &NumArray,
    bias_beta: &NumArray,
    bias_alpha: &NumArray,
) -> Result<GateTrace> {
    let gate = |w: &NumArray, b: &NumArray| -> Result<NumArray> {
        let mut pre = h.matmul(w)?;
        if b.len() != pre.cols() {
            return Err(Error::ShapeMismatch { op: "compute_gates", left: pre.shape().to_vec(), right: b.shape().to_vec() });
        }
        for r in 0..pre.rows() {
            pre.row_mut(r).iter_mut().zip(b.data()).for_each(|(x, b)| *x = array::sigmoid(*x + b));
        }
        Ok(pre)
    };
    let beta = gate(w_beta, bias_beta)?;
    let alpha = gate(w_alpha, bias_alpha)?;
    if alpha.shape() != beta.shape() {
        return Err(Error::ShapeMismatch { op: "compute_gates", left: alpha.shape().to_vec(), right: beta.shape().to_vec() });
    }
    Ok(GateTrace { alpha, beta, fusion: None })
}

fn check_key(k: &[f64], token: usize) -> Result<()> {
    let norm = dot(k, k).sqrt();
    if (norm - 1.0).abs() > KEY_NORM_TOL {
        return Err(Error::KeyNorm { token, norm });
    }
    Ok(())
}

fn check_step_shapes(s: &MemoryState, k: &[f64], v: &[f64]) -> Result<()> {
    if k.len() != s.d_k() || v.len() != s.d_v() {
        return Err(Error::ShapeMismatch { op: "delta_step", left: s.s.shape().to_vec(), right: vec![v.len(), k.len()] });
    }
    Ok(())
}

/// In-place gated delta update of a row-major `d_v × d_k` memory.
#[inline]
fn step_in_place(s: &mut [f64], k: &[f64], v: &[f64], alpha: f64, beta: f64, rule: UpdateRule) {
    let dk = k.len();
    match rule {
        UpdateRule::GatedDelta => {
            for (row, &vi) in s.chunks_mut(dk).zip(v) {
                let v_old = alpha * dot(row, k);
                let v_new = beta * vi + (1.0 - beta) * v_old;
                for (sij, &kj) in row.iter_mut().zip(k) {
                    *sij = alpha * *sij - v_old * kj + v_new * kj;
                }
            }
        }
        UpdateRule::Additive => {
            for (row, &vi) in s.chunks_mut(dk).zip(v) {
                let w = beta * vi;
                for (sij, &kj) in row.iter_mut().zip(k) {
                    *sij = alpha * *sij + w * kj;
                }
            }
        }
    }
}

/// Three-step remove-old / write-new update.
pub fn delta_step(s_prev: &MemoryState, k: &[f64], v: &[f64], alpha: f64, beta: f64) -> Result<DeltaStep> {
    check_step_shapes(s_prev, k, v)?;
    check_key(k, 0)?;
    let v_old: Vec<f64> = s_prev.read(k).into_iter().map(|x| alpha * x).collect();
    let v_new: Vec<f64> = v.iter().zip(&v_old).map(|(vi, vo)| beta * vi + (1.0 - beta) * vo).collect();
    let dk = k.len();
    let mut s = s_prev.s.clone();
    for (i, row) in s.data_mut().chunks_mut(dk).enumerate() {
        for (sij, &kj) in row.iter_mut().zip(k) {
            *sij = alpha * *sij - v_old[i] * kj + v_new[i] * kj;
        }
    }
    Ok(DeltaStep { state: MemoryState { s }, v_old, v_new })
}

/// Single matrix form `S_{t-1} · α(I − β k kᵀ) + β v kᵀ`.
pub fn delta_step_compact(s_prev: &MemoryState, k: &[f64], v: &[f64], alpha: f64, beta: f64) -> Result<MemoryState> {
    check_step_shapes(s_prev, k, v)?;
    check_key(k, 0)?;
    let dk = k.len();
    let mut gate = NumArray::zeros(&[dk, dk]);
    for i in 0..dk {
        for j in 0..dk {
            let eye = if i == j { 1.0 } else { 0.0 };
            gate.set2(i, j, alpha * (eye - beta * k[i] * k[j]));
        }
    }
    let mut s = s_prev.s.matmul(&gate)?;
    for (i, row) in s.data_mut().chunks_mut(dk).enumerate() {
        for (sij, &kj) in row.iter_mut().zip(k) {
            *sij += beta * v[i] * kj;
        }
    }
    Ok(MemoryState { s })
}

/// Divide each per-head key row by its L2 norm.
pub fn normalize_keys(k_raw: &NumArray) -> Result<NumArray> {
    if k_raw.shape().len() != 3 {
        return Err(Error::ShapeMismatch { op: "normalize_keys", left: k_raw.shape().to_vec(), right: vec![0, 0, 0] });
    }
    let (heads, dk) = (k_raw.shape()[1], k_raw.shape()[2]);
    let mut out = k_raw.clone();
    for (idx, row) in out.data_mut().chunks_mut(dk).enumerate() {
        let norm = dot(row, row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormKey { token: idx / heads, head: idx % heads });
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(out)
}

fn validate(qkv: &QkvSequences, gates: &GateTrace, s0: Option<&[MemoryState]>, check_keys: bool) -> Result<()> {
    let n = qkv.len();
    if n == 0 {
        return Err(Error::EmptyInput("scan"));
    }
    if gates.len() != n {
        return Err(Error::LengthMismatch { what: "gates", got: gates.len(), expected: n });
    }
    if gates.heads() != qkv.heads() || gates.beta.shape() != gates.alpha.shape() {
        return Err(Error::ShapeMismatch {
            op: "scan",
            left: gates.alpha.shape().to_vec(),
            right: vec![n, qkv.heads()],
        });
    }
    if let Some(s0) = s0 {
        if s0.len() != qkv.heads() || s0.iter().any(|s| s.d_v() != qkv.d_v() || s.d_k() != qkv.d_k()) {
            return Err(Error::LengthMismatch { what: "initial states", got: s0.len(), expected: qkv.heads() });
        }
    }
    if check_keys {
        let dk = qkv.d_k();
        for (idx, row) in qkv.k.data().chunks(dk).enumerate() {
            check_key(row, idx / qkv.heads())?;
        }
    }
    Ok(())
}

/// One head's slice of token `t`.
#[inline]
fn head_row(a: &NumArray, t: usize, h: usize) -> &[f64] {
    let (heads, dim) = (a.shape()[1], a.shape()[2]);
    &a.data()[(t * heads + h) * dim..(t * heads + h + 1) * dim]
}

/// Blocked scan of one head: state carried across chunk boundaries,
/// token-by-token inside each chunk. Returns `(outputs N×d_v, final state)`.
fn scan_head_blocked(
    qkv: &QkvSequences,
    gates: &GateTrace,
    h: usize,
    s0: Option<&MemoryState>,
    chunk: usize,
    rule: UpdateRule,
) -> (Vec<f64>, MemoryState) {
    let (n, dv, dk) = (qkv.len(), qkv.d_v(), qkv.d_k());
    let mut s = s0.map_or_else(|| vec![0.0; dv * dk], |s| s.s.data().to_vec());
    let mut out = vec![0.0; n * dv];
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        for t in start..end {
            let k = head_row(&qkv.k, t, h);
            let v = head_row(&qkv.v, t, h);
            step_in_place(&mut s, k, v, gates.alpha.get2(t, h), gates.beta.get2(t, h), rule);
            let q = head_row(&qkv.q, t, h);
            for (o, row) in out[t * dv..(t + 1) * dv].iter_mut().zip(s.chunks(dk)) {
                *o = dot(row, q);
            }
        }
        start = end;
    }
    (out, MemoryState { s: NumArray::from_parts(vec![dv, dk], s) })
}

/// Chunk-parallel form of one head. Inside a chunk of `C` tokens the memory
/// is `S_t = γ_t S_0 + Σ_{i≤t} (γ_t/γ_i) u_i k_iᵀ`, with pseudo-values `u`
/// from a unit lower-triangular solve built from `K Kᵀ`; outputs follow from
/// `Q Kᵀ` and `S_0 Q`.
fn scan_head_wy(
    qkv: &QkvSequences,
    gates: &GateTrace,
    h: usize,
    s0: Option<&MemoryState>,
    chunk: usize,
    rule: UpdateRule,
) -> (Vec<f64>, MemoryState) {
    let (n, dv, dk) = (qkv.len(), qkv.d_v(), qkv.d_k());
    let mut s = s0.map_or_else(|| vec![0.0; dv * dk], |s| s.s.data().to_vec());
    let mut out = vec![0.0; n * dv];
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let c = end - start;
        let ks: Vec<&[f64]> = (start..end).map(|t| head_row(&qkv.k, t, h)).collect();
        let qs: Vec<&[f64]> = (start..end).map(|t| head_row(&qkv.q, t, h)).collect();
        let vs: Vec<&[f64]> = (start..end).map(|t| head_row(&qkv.v, t, h)).collect();
        let alpha: Vec<f64> = (start..end).map(|t| gates.alpha.get2(t, h)).collect();
        let beta: Vec<f64> = (start..end).map(|t| gates.beta.get2(t, h)).collect();

        // decay[t][i] = ∏_{i<τ≤t} α_τ over chunk positions, slot 0 = chunk start.
        let mut decay = vec![0.0; c * (c + 1)];
        for t in 0..c {
            for i in 0..=t + 1 {
                decay[t * (c + 1) + i] = if i == t + 1 {
                    1.0
                } else if t == 0 {
                    alpha[0]
                } else {
                    decay[(t - 1) * (c + 1) + i] * alpha[t]
                };
            }
        }
        let dec = |t: usize, i: usize| decay[t * (c + 1) + i];

        let state = MemoryState { s: NumArray::from_parts(vec![dv, dk], s.clone()) };
        let s0k: Vec<Vec<f64>> = ks.iter().map(|k| state.read(k)).collect();
        let s0q: Vec<Vec<f64>> = qs.iter().map(|q| state.read(q)).collect();

        let mut u = vec![vec![0.0; dv]; c];
        for t in 0..c {
            let mut rhs: Vec<f64> = vs[t].iter().map(|x| beta[t] * x).collect();
            if let UpdateRule::GatedDelta = rule {
                for (r, s0kt) in rhs.iter_mut().zip(&s0k[t]) {
                    *r -= beta[t] * dec(t, 0) * s0kt;
                }
                for i in 0..t {
                    let w = beta[t] * dec(t, i + 1) * dot(ks[i], ks[t]);
                    for (r, ui) in rhs.iter_mut().zip(&u[i]) {
                        *r -= w * ui;
                    }
                }
            }
            u[t] = rhs;
        }
        for t in 0..c {
            let o = &mut out[(start + t) * dv..(start + t + 1) * dv];
            for (oj, sq) in o.iter_mut().zip(&s0q[t]) {
                *oj = dec(t, 0) * sq;
            }
            for i in 0..=t {
                let w = dec(t, i + 1) * dot(ks[i], qs[t]);
                for (oj, ui) in o.iter_mut().zip(&u[i]) {
                    *oj += w * ui;
                }
            }
        }
        let g_end = dec(c - 1, 0);
        s.iter_mut().for_each(|x| *x *= g_end);
        for i in 0..c {
            let w = dec(c - 1, i + 1);
            for (row, ui) in s.chunks_mut(dk).zip(&u[i]) {
                for (sij, kj) in row.iter_mut().zip(ks[i]) {
                    *sij += w * ui * kj;
                }
            }
        }
        start = end;
    }
    (out, MemoryState { s: NumArray::from_parts(vec![dv, dk], s) })
}

type HeadScan = fn(&QkvSequences, &GateTrace, usize, Option<&MemoryState>, usize, UpdateRule) -> (Vec<f64>, MemoryState);

fn scan_all_heads(
    qkv: &QkvSequences,
    gates: &GateTrace,
    s0: Option<&[MemoryState]>,
    chunk: usize,
    rule: UpdateRule,
    exec: Exec,
    head_scan: HeadScan,
) -> ScanOutput {
    let (n, heads, dv) = (qkv.len(), qkv.heads(), qkv.d_v());
    let per_head = par::map_range(exec, heads, |h| head_scan(qkv, gates, h, s0.map(|s| &s[h]), chunk, rule));
    let mut outputs = vec![0.0; n * heads * dv];
    let mut states = Vec::with_capacity(heads);
    for (h, (o, s)) in per_head.into_iter().enumerate() {
        for t in 0..n {
            outputs[(t * heads + h) * dv..(t * heads + h + 1) * dv].copy_from_slice(&o[t * dv..(t + 1) * dv]);
        }
        states.push(s);
    }
    ScanOutput { outputs: NumArray::from_parts(vec![n, heads, dv], outputs), states }
}

/// Token-by-token scan; `o_t = S_t q_t` read after the update.
/// `s0 = None` starts every head from the zero memory.
pub fn recurrent_scan(qkv: &QkvSequences, gates: &GateTrace, s0: Option<&[MemoryState]>) -> Result<ScanOutput> {
    validate(qkv, gates, s0, true)?;
    Ok(scan_all_heads(qkv, gates, s0, usize::MAX, UpdateRule::GatedDelta, Exec::Sequential, scan_head_blocked))
}

/// Blocked scan carrying the memory across chunks of `chunk_size` tokens.
pub fn chunked_scan(qkv: &QkvSequences, gates: &GateTrace, s0: Option<&[MemoryState]>, chunk_size: usize) -> Result<ScanOutput> {
    chunked_scan_with(qkv, gates, s0, chunk_size, UpdateRule::GatedDelta, Exec::default())
}

pub fn chunked_scan_with(
    qkv: &QkvSequences,
    gates: &GateTrace,
    s0: Option<&[MemoryState]>,
    chunk_size: usize,
    rule: UpdateRule,
    exec: Exec,
) -> Result<ScanOutput> {
    if chunk_size == 0 {
        return Err(Error::Invalid("chunk_size must be at least 1".into()));
    }
    validate(qkv, gates, s0, rule == UpdateRule::GatedDelta)?;
    Ok(scan_all_heads(qkv, gates, s0, chunk_size, rule, exec, scan_head_blocked))
}

/// Chunk-parallel (triangular-solve) variant of [`chunked_scan`].
pub fn chunked_scan_wy(
    qkv: &QkvSequences,
    gates: &GateTrace,
    s0: Option<&[MemoryState]>,
    chunk_size: usize,
    rule: UpdateRule,
    exec: Exec,
) -> Result<ScanOutput> {
    if chunk_size == 0 {
        return Err(Error::Invalid("chunk_size must be at least 1".into()));
    }
    validate(qkv, gates, s0, rule == UpdateRule::GatedDelta)?;
    Ok(scan_all_heads(qkv, gates, s0, chunk_size, rule, exec, scan_head_wy))
}

/// Scan used by the model. Keys are only approximately unit (a degenerate
/// all-zero projection yields zero keys), so norms are not checked.
pub(crate) fn model_scan(
    qkv: &QkvSequences,
    gates: &GateTrace,
    chunk_size: usize,
    rule: UpdateRule,
    exec: Exec,
) -> Result<ScanOutput> {
    validate(qkv, gates, None, false)?;
    Ok(scan_all_heads(qkv, gates, None, chunk_size.max(1), rule, exec, scan_head_blocked))
}

/// Differentiable scan on a tape.
///
/// `q`, `k`: `N × heads·d_k`; `v`: `N × heads·d_v`; `alpha`, `beta`:
/// `N × heads`. Returns `N × heads·d_v`. Without gradients the plain
/// kernel runs and its result is recorded as a constant; with gradients
/// each update is composed from primitive tape ops so the tape carries
/// the backward pass through time.
#[allow(clippy::too_many_arguments)]
pub fn scan_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    alpha: Var,
    beta: Var,
    heads: usize,
    chunk_size: usize,
    rule: UpdateRule,
    exec: Exec,
) -> Result<Var> {
    let n = tape.value(q).rows();
    let dk = tape.value(q).cols() / heads;
    let dv = tape.value(v).cols() / heads;
    let needs_grad = [q, k, v, alpha, beta].iter().any(|&x| tape.requires_grad(x));
    if !needs_grad {
        let to3 = |a: &NumArray, d: usize| a.clone().reshape(vec![n, heads, d]);
        let qkv = QkvSequences::new(to3(tape.value(q), dk)?, to3(tape.value(k), dk)?, to3(tape.value(v), dv)?)?;
        let gates = GateTrace { alpha: tape.value(alpha).clone(), beta: tape.value(beta).clone(), fusion: None };
        let out = model_scan(&qkv, &gates, chunk_size, rule, exec)?;
        let flat = out.outputs.reshape(vec![n, heads * dv])?;
        return Ok(tape.constant(flat));
    }

    let chunk = chunk_size.max(1);
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut s = tape.constant(NumArray::zeros(&[dv, dk]));
        let mut outs = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            for t in start..end {
                let kt = tape.slice(k, t, 1, h * dk, dk)?;
                let kcol = tape.reshape(kt, &[dk, 1])?;
                let vt = tape.slice(v, t, 1, h * dv, dv)?;
                let vcol = tape.reshape(vt, &[dv, 1])?;
                let a = tape.slice(alpha, t, 1, h, 1)?;
                let b = tape.slice(beta, t, 1, h, 1)?;
                let decayed = tape.mul(s, a)?;
                let write = match rule {
                    UpdateRule::GatedDelta => {
                        let sk = tape.matmul(s, kcol)?;
                        let v_old = tape.mul(sk, a)?;
                        let bv = tape.mul(vcol, b)?;
                        let keep = tape.one_minus(b);
                        let kept = tape.mul(v_old, keep)?;
                        let v_new = tape.add(bv, kept)?;
                        tape.sub(v_new, v_old)?
                    }
                    UpdateRule::Additive => tape.mul(vcol, b)?,
                };
                let outer = tape.matmul(write, kt)?;
                s = tape.add(decayed, outer)?;
                let qt = tape.slice(q, t, 1, h * dk, dk)?;
                let qcol = tape.reshape(qt, &[dk, 1])?;
                let o = tape.matmul(s, qcol)?;
                outs.push(tape.reshape(o, &[1, dv])?);
            }
            start = end;
        }
        head_outputs.push(tape.concat_rows(&outs)?);
    }
    tape.concat_cols(&head_outputs)
}
