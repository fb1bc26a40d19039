//! Dense f64 kernels with hand-written backward passes: affine maps, a GRU
//! cell, Adam, and a central-difference gradient checker.
//!
//! Backward functions *accumulate* into caller-owned gradient buffers so that
//! gradients from several rounds and episodes can be summed in place.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Borrowed row-major matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self> {
        check_len("matrix storage", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Owned row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix storage", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }
}

pub type Tensor1 = Vec<f64>;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = W x`.
fn matvec(w: MatRef<'_>, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(i), x);
    }
}

/// `out += Wᵀ g`.
fn matvec_t_acc(w: MatRef<'_>, g: &[f64], out: &mut [f64]) {
    for (i, &gi) in g.iter().enumerate() {
        if gi != 0.0 {
            for (o, &wij) in out.iter_mut().zip(w.row(i)) {
                *o += wij * gi;
            }
        }
    }
}

/// `grad_w += g xᵀ`.
fn outer_acc(grad_w: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi != 0.0 {
            for (gw, &xj) in grad_w[i * cols..(i + 1) * cols].iter_mut().zip(x) {
                *gw += gi * xj;
            }
        }
    }
}

fn check_affine(w: MatRef<'_>, b: &[f64], x: &[f64]) -> Result<()> {
    check_len("affine storage", w.rows * w.cols, w.data.len())?;
    check_len("affine bias", w.rows, b.len())?;
    check_len("affine input", w.cols, x.len())
}

/// `y = W x + b`.
pub fn affine_forward(w: MatRef<'_>, b: &[f64], x: &[f64]) -> Result<Tensor1> {
    check_affine(w, b, x)?;
    let mut y = vec![0.0; w.rows];
    matvec(w, x, &mut y);
    for (yi, bi) in y.iter_mut().zip(b) {
        *yi += bi;
    }
    Ok(y)
}

/// Accumulates `∂L/∂W` and `∂L/∂b` for `y = W x + b` and returns `∂L/∂x`.
pub fn affine_backward(
    w: MatRef<'_>,
    x: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Result<Tensor1> {
    check_len("affine input", w.cols, x.len())?;
    check_len("affine grad_out", w.rows, grad_out.len())?;
    check_len("affine grad_w", w.data.len(), grad_w.len())?;
    check_len("affine grad_b", w.rows, grad_b.len())?;
    outer_acc(grad_w, grad_out, x);
    for (gb, g) in grad_b.iter_mut().zip(grad_out) {
        *gb += g;
    }
    let mut grad_x = vec![0.0; w.cols];
    matvec_t_acc(w, grad_out, &mut grad_x);
    Ok(grad_x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Read-only GRU parameters. `u_*` are `H × E`, `v_*` are `H × H`, `b_*` length `H`.
///
/// ```text
/// z  = σ(U_z x + V_z h + b_z)
/// ρ  = σ(U_r x + V_r h + b_r)
/// h̃  = tanh(U_h x + V_h (ρ ∘ h) + b_h)
/// h' = (1 − z) ∘ h + z ∘ h̃
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruWeights<'a> {
    pub u_z: MatRef<'a>,
    pub v_z: MatRef<'a>,
    pub b_z: &'a [f64],
    pub u_r: MatRef<'a>,
    pub v_r: MatRef<'a>,
    pub b_r: &'a [f64],
    pub u_h: MatRef<'a>,
    pub v_h: MatRef<'a>,
    pub b_h: &'a [f64],
}

impl GruWeights<'_> {
    pub fn input_dim(&self) -> usize {
        self.u_z.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.u_z.rows
    }
}

/// Gradient buffers mirroring [`GruWeights`].
#[derive(Debug)]
pub struct GruGrads<'a> {
    pub u_z: &'a mut [f64],
    pub v_z: &'a mut [f64],
    pub b_z: &'a mut [f64],
    pub u_r: &'a mut [f64],
    pub v_r: &'a mut [f64],
    pub b_r: &'a mut [f64],
    pub u_h: &'a mut [f64],
    pub v_h: &'a mut [f64],
    pub b_h: &'a mut [f64],
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub x: Tensor1,
    pub h_prev: Tensor1,
    pub z: Tensor1,
    pub reset: Tensor1,
    pub reset_h: Tensor1,
    pub candidate: Tensor1,
    pub h: Tensor1,
}

impl GruCache {
    /// The cell output; identical to the new hidden state.
    pub fn output(&self) -> &[f64] {
        &self.h
    }
}

pub fn gru_forward(w: &GruWeights<'_>, x: &[f64], h_prev: &[f64]) -> Result<GruCache> {
    let hd = w.hidden_dim();
    let ed = w.input_dim();
    check_len("gru input", ed, x.len())?;
    check_len("gru hidden", hd, h_prev.len())?;
    for (m, cols) in [(w.u_z, ed), (w.u_r, ed), (w.u_h, ed), (w.v_z, hd), (w.v_r, hd), (w.v_h, hd)] {
        check_len("gru weight rows", hd, m.rows)?;
        check_len("gru weight cols", cols, m.cols)?;
    }
    for b in [w.b_z, w.b_r, w.b_h] {
        check_len("gru bias", hd, b.len())?;
    }

    let mut z = vec![0.0; hd];
    let mut reset = vec![0.0; hd];
    let mut candidate = vec![0.0; hd];
    let mut tmp = vec![0.0; hd];

    matvec(w.u_z, x, &mut z);
    matvec(w.v_z, h_prev, &mut tmp);
    for i in 0..hd {
        z[i] = sigmoid(z[i] + tmp[i] + w.b_z[i]);
    }
    matvec(w.u_r, x, &mut reset);
    matvec(w.v_r, h_prev, &mut tmp);
    for i in 0..hd {
        reset[i] = sigmoid(reset[i] + tmp[i] + w.b_r[i]);
    }
    let reset_h: Vec<f64> = reset.iter().zip(h_prev).map(|(r, h)| r * h).collect();
    matvec(w.u_h, x, &mut candidate);
    matvec(w.v_h, &reset_h, &mut tmp);
    for i in 0..hd {
        candidate[i] = (candidate[i] + tmp[i] + w.b_h[i]).tanh();
    }
    let h = (0..hd)
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * candidate[i])
        .collect();
    Ok(GruCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        z,
        reset,
        reset_h,
        candidate,
        h,
    })
}

/// Accumulates parameter gradients and returns `(∂L/∂x, ∂L/∂h_prev)`.
pub fn gru_backward(
    w: &GruWeights<'_>,
    cache: &GruCache,
    grad_h: &[f64],
    grads: &mut GruGrads<'_>,
) -> Result<(Tensor1, Tensor1)> {
    let hd = w.hidden_dim();
    check_len("gru grad_h", hd, grad_h.len())?;
    let GruCache {
        x,
        h_prev,
        z,
        reset,
        reset_h,
        candidate,
        ..
    } = cache;

    let mut grad_x = vec![0.0; w.input_dim()];
    let mut grad_h_prev = vec![0.0; hd];
    let mut da_h = vec![0.0; hd];
    let mut da_z = vec![0.0; hd];
    for i in 0..hd {
        let g = grad_h[i];
        grad_h_prev[i] = g * (1.0 - z[i]);
        da_h[i] = g * z[i] * (1.0 - candidate[i] * candidate[i]);
        da_z[i] = g * (candidate[i] - h_prev[i]) * z[i] * (1.0 - z[i]);
    }

    // Candidate branch.
    outer_acc(grads.u_h, &da_h, x);
    outer_acc(grads.v_h, &da_h, reset_h);
    for (gb, d) in grads.b_h.iter_mut().zip(&da_h) {
        *gb += d;
    }
    matvec_t_acc(w.u_h, &da_h, &mut grad_x);
    let mut grad_reset_h = vec![0.0; hd];
    matvec_t_acc(w.v_h, &da_h, &mut grad_reset_h);
    let mut da_r = vec![0.0; hd];
    for i in 0..hd {
        grad_h_prev[i] += grad_reset_h[i] * reset[i];
        da_r[i] = grad_reset_h[i] * h_prev[i] * reset[i] * (1.0 - reset[i]);
    }

    // Update gate.
    outer_acc(grads.u_z, &da_z, x);
    outer_acc(grads.v_z, &da_z, h_prev);
    for (gb, d) in grads.b_z.iter_mut().zip(&da_z) {
        *gb += d;
    }
    matvec_t_acc(w.u_z, &da_z, &mut grad_x);
    matvec_t_acc(w.v_z, &da_z, &mut grad_h_prev);

    // Reset gate.
    outer_acc(grads.u_r, &da_r, x);
    outer_acc(grads.v_r, &da_r, h_prev);
    for (gb, d) in grads.b_r.iter_mut().zip(&da_r) {
        *gb += d;
    }
    matvec_t_acc(w.u_r, &da_r, &mut grad_x);
    matvec_t_acc(w.v_r, &da_r, &mut grad_h_prev);

    Ok((grad_x, grad_h_prev))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment accumulators for Adam, laid out like the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Bias-corrected Adam update with zero weight decay. Parameters are left
/// untouched when any gradient entry is non-finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    check_len("adam grads", params.len(), grads.len())?;
    check_len("adam first moment", params.len(), state.m.len())?;
    check_len("adam second moment", params.len(), state.v.len())?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be ≥ 0, got {lr}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "gradient entry {i} is {} at step {}",
            grads[i],
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub numeric: Vec<f64>,
}

/// Fourth-order central-difference check of `analytic` against `f` at
/// `params`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
/// The floor keeps near-zero entries, where the difference quotient is
/// dominated by round-off, from reporting spurious relative errors.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "gradient length");
    let mut theta = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut worst = (0.0, None);
    for i in 0..params.len() {
        let orig = theta[i];
        let mut at = |delta: f64| {
            theta[i] = orig + delta;
            f(&theta)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
        theta[i] = orig;
        let n = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let a = analytic[i];
        let err = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR);
        if err > worst.0 || worst.1.is_none() {
            worst = (err, Some(i));
        }
        numeric.push(n);
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        numeric,
    }
}

/// Uniform `(-1/√fan_in, 1/√fan_in)` initialisation.
pub fn init_uniform(out: &mut [f64], fan_in: usize, rng: &mut impl rand::Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for x in out {
        *x = rng.random_range(-bound..bound);
    }
}
