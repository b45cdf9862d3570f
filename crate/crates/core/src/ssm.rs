//! Diagonal state-space machinery: zero-order-hold discretization, the
//! sequential reference recurrence, a Blelloch parallel prefix scan over the
//! affine recurrence element, and the data-dependent (selective) scan used by
//! the 2-D scan module.
//!
//! For a diagonal state matrix every state dimension evolves independently:
//!
//! ```text
//! h_k = Ā_k ⊙ h_{k-1} + B̄_k x_k,     y_k = ⟨C_k, h_k⟩ + D x_k,     h_0 = 0
//! Ā = exp(Δa),   B̄ = (exp(Δa) - 1)/a · B
//! ```

use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{inverse_softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Below this `|Δa|` the input factor uses its series expansion.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// Continuous-time parameters for one channel over a sequence of length `L`
/// with state size `N`. `b`, `c` are `(L, N)`; `delta` has `L` entries, so a
/// time-invariant system simply repeats its rows.
#[derive(Clone, Debug)]
pub struct SsmParams<T> {
    /// Diagonal of the state matrix.
    pub a: Vec<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d: T,
    pub delta: Vec<T>,
}

impl<T: Scalar> SsmParams<T> {
    /// Time-invariant system repeated over `len` steps.
    pub fn time_invariant(a: Vec<T>, b: Vec<T>, c: Vec<T>, d: T, delta: T, len: usize) -> Self {
        let n = a.len();
        let rep = |v: &[T]| Tensor::new(&[len, n], v.iter().copied().cycle().take(len * n).collect()).expect("shape");
        Self {
            b: rep(&b),
            c: rep(&c),
            a,
            d,
            delta: vec![delta; len],
        }
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn state_size(&self) -> usize {
        self.a.len()
    }
}

/// Per-step discrete transition `Ā` and input map `B̄`, both `(L, N)`.
#[derive(Clone, Debug)]
pub struct DiscretizedSsm<T> {
    pub a_bar: Tensor<T>,
    pub b_bar: Tensor<T>,
}

impl<T: Scalar> DiscretizedSsm<T> {
    pub fn len(&self) -> usize {
        self.a_bar.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_size(&self) -> usize {
        self.a_bar.shape()[1]
    }
}

/// `Ā = exp(Δa)`.
#[inline]
pub fn zoh_transition<T: Scalar>(delta: T, a: T) -> T {
    (delta * a).exp()
}

/// Input factor `φ(Δ, a) = (exp(Δa) - 1)/a` so that `B̄ = φ·B`.
#[inline]
pub fn zoh_input_factor<T: Scalar>(delta: T, a: T) -> T {
    let x = delta * a;
    if x.abs() < T::of(ZOH_SERIES_THRESHOLD) {
        delta * (T::one() + x * T::of(0.5))
    } else {
        delta * x.exp_m1() / x
    }
}

/// Taylor coefficients `(m+1)/(m+2)!` of `g(x) = (x eˣ - (eˣ - 1))/x²`.
const G_SERIES: [f64; 12] = [
    1.0 / 2.0,
    1.0 / 3.0,
    1.0 / 8.0,
    1.0 / 30.0,
    1.0 / 144.0,
    1.0 / 840.0,
    1.0 / 5760.0,
    1.0 / 45360.0,
    1.0 / 403200.0,
    1.0 / 3991680.0,
    1.0 / 43545600.0,
    1.0 / 518918400.0,
];

/// `g(x)` given `eˣ` already evaluated.
#[inline]
fn zoh_g<T: Scalar>(x: T, ex: T) -> T {
    if x.abs() < T::of(0.1) {
        G_SERIES.iter().rev().fold(T::zero(), |acc, &c| acc * x + T::of(c))
    } else {
        (x * ex - (ex - T::one())) / (x * x)
    }
}

/// `∂φ/∂a = Δ²·g(Δa)`.
#[cfg(test)]
fn zoh_input_factor_da<T: Scalar>(delta: T, a: T) -> T {
    let x = delta * a;
    delta * delta * zoh_g(x, x.exp())
}

/// `(Ā, φ)` sharing one `expm1`.
#[inline]
pub(crate) fn zoh_pair<T: Scalar>(delta: T, a: T) -> (T, T) {
    let x = delta * a;
    let em = x.exp_m1();
    let phi = if x.abs() < T::of(ZOH_SERIES_THRESHOLD) {
        delta * (T::one() + x * T::of(0.5))
    } else {
        delta * em / x
    };
    (T::one() + em, phi)
}

/// Zero-order-hold discretization of a diagonal system.
pub fn discretize<T: Scalar>(params: &SsmParams<T>) -> Result<DiscretizedSsm<T>> {
    let l = params.len();
    let n = params.state_size();
    if params.b.shape() != [l, n] || params.c.shape() != [l, n] {
        return Err(Error::shape(
            "discretize",
            format!("b {:?}, c {:?} for L={l}, N={n}", params.b.shape(), params.c.shape()),
        ));
    }
    if let Some(bad) = params.delta.iter().find(|&&d| !(d > T::zero())) {
        return Err(Error::Domain(format!("timescale must be positive, got {bad}")));
    }
    if params.a.iter().any(|a| !a.is_finite()) {
        return Err(Error::Domain("state matrix has non-finite entries".into()));
    }
    let mut a_bar = Vec::with_capacity(l * n);
    let mut b_bar = Vec::with_capacity(l * n);
    for (k, &delta) in params.delta.iter().enumerate() {
        for (j, &a) in params.a.iter().enumerate() {
            a_bar.push(zoh_transition(delta, a));
            b_bar.push(zoh_input_factor(delta, a) * params.b.data()[k * n + j]);
        }
    }
    Ok(DiscretizedSsm {
        a_bar: Tensor::new(&[l, n], a_bar)?,
        b_bar: Tensor::new(&[l, n], b_bar)?,
    })
}

fn check_scan_inputs<T: Scalar>(disc: &DiscretizedSsm<T>, c: &Tensor<T>, x: &[T]) -> Result<()> {
    let l = x.len();
    if l == 0 {
        return Err(Error::shape("scan", "empty input sequence"));
    }
    let n = disc.state_size();
    for (name, t) in [("a_bar", &disc.a_bar), ("b_bar", &disc.b_bar), ("c", c)] {
        if t.shape() != [l, n] {
            return Err(Error::shape(
                "scan",
                format!("{name} {:?}, expected [{l}, {n}]", t.shape()),
            ));
        }
    }
    Ok(())
}

/// Reference left-to-right recurrence.
pub fn scan_sequential<T: Scalar>(disc: &DiscretizedSsm<T>, c: &Tensor<T>, d: T, x: &[T]) -> Result<Vec<T>> {
    check_scan_inputs(disc, c, x)?;
    let n = disc.state_size();
    let mut h = vec![T::zero(); n];
    let mut y = Vec::with_capacity(x.len());
    for (k, &xk) in x.iter().enumerate() {
        let row = k * n..(k + 1) * n;
        let (ab, bb, cc) = (
            &disc.a_bar.data()[row.clone()],
            &disc.b_bar.data()[row.clone()],
            &c.data()[row],
        );
        let mut yk = d * xk;
        for j in 0..n {
            h[j] = ab[j] * h[j] + bb[j] * xk;
            yk = yk + cc[j] * h[j];
        }
        y.push(yk);
    }
    Ok(y)
}

/// Same result as [`scan_sequential`], computed with a Blelloch prefix scan
/// over [`ScanElement`]s.
pub fn scan_parallel<T: Scalar>(disc: &DiscretizedSsm<T>, c: &Tensor<T>, d: T, x: &[T]) -> Result<Vec<T>> {
    check_scan_inputs(disc, c, x)?;
    let l = x.len();
    let n = disc.state_size();
    let states: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let a: Vec<T> = (0..l).map(|k| disc.a_bar.data()[k * n + j]).collect();
            let b: Vec<T> = (0..l).map(|k| disc.b_bar.data()[k * n + j] * x[k]).collect();
            blelloch_scan(&a, &b)
        })
        .collect();
    Ok((0..l)
        .map(|k| {
            let mut yk = d * x[k];
            for (j, h) in states.iter().enumerate() {
                yk = yk + c.data()[k * n + j] * h[k];
            }
            yk
        })
        .collect())
}

/// Affine map `h ↦ a·h + b`, the associative element of the recurrence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> ScanElement<T> {
    pub fn identity() -> Self {
        Self {
            a: T::one(),
            b: T::zero(),
        }
    }

    /// Applies `self` first, then `later`: `(a₂,b₂)∘(a₁,b₁) = (a₂a₁, a₂b₁ + b₂)`.
    #[inline]
    pub fn then(self, later: Self) -> Self {
        Self {
            a: later.a * self.a,
            b: later.a * self.b + later.b,
        }
    }
}

/// Up-sweep blocks per level above which the level is split across threads.
const PAR_BLOCKS: usize = 1 << 12;

/// Inclusive scan of `h_k = a_k h_{k-1} + b_k` (`h_0 = 0`) by a
/// work-efficient up-sweep/down-sweep over a power-of-two padded tree. The
/// combination tree depends only on the length, so results do not depend on
/// the number of worker threads.
pub fn blelloch_scan<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    assert_eq!(a.len(), b.len());
    let l = a.len();
    if l == 0 {
        return Vec::new();
    }
    let size = l.next_power_of_two();
    let mut tree: Vec<ScanElement<T>> = a
        .iter()
        .zip(b)
        .map(|(&a, &b)| ScanElement { a, b })
        .chain(std::iter::repeat(ScanElement::identity()))
        .take(size)
        .collect();
    let leaves: Vec<ScanElement<T>> = tree[..l].to_vec();

    let mut stride = 2;
    while stride <= size {
        let half = stride / 2;
        let step = |block: &mut [ScanElement<T>]| {
            block[stride - 1] = block[half - 1].then(block[stride - 1]);
        };
        if size / stride >= PAR_BLOCKS {
            tree.par_chunks_mut(stride).for_each(step);
        } else {
            tree.chunks_mut(stride).for_each(step);
        }
        stride *= 2;
    }

    tree[size - 1] = ScanElement::identity();
    let mut stride = size;
    while stride >= 2 {
        let half = stride / 2;
        let step = |block: &mut [ScanElement<T>]| {
            let left = block[half - 1];
            let prefix = block[stride - 1];
            block[half - 1] = prefix;
            block[stride - 1] = prefix.then(left);
        };
        if size / stride >= PAR_BLOCKS {
            tree.par_chunks_mut(stride).for_each(step);
        } else {
            tree.chunks_mut(stride).for_each(step);
        }
        stride /= 2;
    }

    // exclusive prefix composed with the element itself; h_0 = 0 so the
    // state is the offset of the accumulated map
    tree.iter()
        .zip(&leaves)
        .map(|(prefix, &leaf)| prefix.then(leaf).b)
        .collect()
}

/// Plain loop form of the same recurrence.
pub fn sequential_recurrence<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    let mut h = T::zero();
    a.iter()
        .zip(b)
        .map(|(&a, &b)| {
            h = a * h + b;
            h
        })
        .collect()
}

/// Which recurrence kernel the selective scan runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanKernel {
    #[default]
    Sequential,
    Parallel,
}

/// Differentiable selective scan over a batch of channel sequences.
///
/// Shapes: `u`, `delta`: `(B, L, E)`; `a`: `(E, N)`; `b`, `c`: `(B, L, N)`
/// shared across channels; `d`: `(E)`. Returns `(B, L, E)`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<T: Scalar>(
    g: &Graph<T>,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    kernel: ScanKernel,
) -> Result<Var> {
    let (uv, dv, av, bv, cv, dd) = (
        g.value(u),
        g.value(delta),
        g.value(a),
        g.value(b),
        g.value(c),
        g.value(d),
    );
    let [bn, l, e] = *uv.shape() else {
        return Err(Error::shape("selective_scan", format!("u {:?}", uv.shape())));
    };
    let n = av.shape().get(1).copied().unwrap_or(0);
    let ok = dv.shape() == [bn, l, e]
        && av.shape() == [e, n]
        && bv.shape() == [bn, l, n]
        && cv.shape() == [bn, l, n]
        && dd.shape() == [e];
    if !ok || l == 0 {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "u {:?} delta {:?} a {:?} b {:?} c {:?} d {:?}",
                uv.shape(),
                dv.shape(),
                av.shape(),
                bv.shape(),
                cv.shape(),
                dd.shape()
            ),
        ));
    }
    if dv.data().iter().any(|&x| !(x > T::zero())) {
        return Err(Error::Domain("selective_scan: timescale must be positive".into()));
    }

    // flat buffers, one contiguous length-L run per (batch, channel, state)
    let (ud, dtd, ad, bd) = (uv.data(), dv.data(), av.data(), bv.data());
    let total = bn * e * n * l;
    let mut abar = vec![T::zero(); total];
    let mut phi = vec![T::zero(); total];
    let mut states = vec![T::zero(); total];
    let fill = |s: usize, ((ab, ph), hs): ((&mut [T], &mut [T]), &mut [T])| {
        let (bi, ei, j) = (s / (e * n), (s / n) % e, s % n);
        let aj = ad[ei * n + j];
        for k in 0..l {
            (ab[k], ph[k]) = zoh_pair(dtd[(bi * l + k) * e + ei], aj);
        }
        let drive = |k: usize| ph[k] * bd[(bi * l + k) * n + j] * ud[(bi * l + k) * e + ei];
        match kernel {
            ScanKernel::Sequential => {
                let mut h = T::zero();
                for k in 0..l {
                    h = ab[k] * h + drive(k);
                    hs[k] = h;
                }
            }
            ScanKernel::Parallel => {
                let b: Vec<T> = (0..l).map(drive).collect();
                hs.copy_from_slice(&blelloch_scan(ab, &b));
            }
        }
    };
    match kernel {
        ScanKernel::Sequential => abar
            .chunks_mut(l)
            .zip(phi.chunks_mut(l))
            .zip(states.chunks_mut(l))
            .enumerate()
            .for_each(|(s, bufs)| fill(s, bufs)),
        ScanKernel::Parallel => abar
            .par_chunks_mut(l)
            .zip(phi.par_chunks_mut(l))
            .zip(states.par_chunks_mut(l))
            .enumerate()
            .for_each(|(s, bufs)| fill(s, bufs)),
    }
    let mut y = vec![T::zero(); bn * l * e];
    for bi in 0..bn {
        for k in 0..l {
            for ei in 0..e {
                let mut acc = dd.data()[ei] * ud[(bi * l + k) * e + ei];
                let base = (bi * e + ei) * n * l + k;
                for j in 0..n {
                    acc = acc + cv.data()[(bi * l + k) * n + j] * states[base + j * l];
                }
                y[(bi * l + k) * e + ei] = acc;
            }
        }
    }
    let cache = Rc::new((abar, phi, states));
    let out = Tensor::new(&[bn, l, e], y)?;
    g.custom("selective_scan", &[u, delta, a, b, c, d], out, move |gy, _| {
        let (abar, phi, states) = &*cache;
        let gy = gy.data();
        let (ud, dtd, ad, bd, cd) = (uv.data(), dv.data(), av.data(), bv.data(), cv.data());
        let mut du = vec![T::zero(); uv.numel()];
        let mut ddelta = vec![T::zero(); dv.numel()];
        let mut da = vec![T::zero(); av.numel()];
        let mut db = vec![T::zero(); bv.numel()];
        let mut dc = vec![T::zero(); cv.numel()];
        let mut dd_ = vec![T::zero(); e];
        let ix = |bi: usize, k: usize, ei: usize| (bi * l + k) * e + ei;
        let jx = |bi: usize, k: usize, j: usize| (bi * l + k) * n + j;
        for bi in 0..bn {
            for k in 0..l {
                for ei in 0..e {
                    let gyv = gy[ix(bi, k, ei)];
                    dd_[ei] = dd_[ei] + gyv * ud[ix(bi, k, ei)];
                    du[ix(bi, k, ei)] = gyv * dd.data()[ei];
                }
            }
        }
        let mut lam = vec![T::zero(); l];
        let (mut a_next, mut src) = match kernel {
            ScanKernel::Sequential => (Vec::new(), Vec::new()),
            ScanKernel::Parallel => (vec![T::zero(); l], vec![T::zero(); l]),
        };
        for bi in 0..bn {
            for ei in 0..e {
                for j in 0..n {
                    let base = ((bi * e + ei) * n + j) * l;
                    let (h, ab, ph) = (&states[base..base + l], &abar[base..base + l], &phi[base..base + l]);
                    let aj = ad[ei * n + j];
                    // adjoint recurrence runs right to left:
                    // λ_k = Ā_{k+1} λ_{k+1} + gy_k C_k
                    let next = |k: usize| if k + 1 < l { ab[k + 1] } else { T::zero() };
                    match kernel {
                        ScanKernel::Sequential => {
                            let mut acc = T::zero();
                            for k in (0..l).rev() {
                                let gyv = gy[ix(bi, k, ei)];
                                acc = next(k) * acc + gyv * cd[jx(bi, k, j)];
                                lam[k] = acc;
                                dc[jx(bi, k, j)] = dc[jx(bi, k, j)] + gyv * h[k];
                            }
                        }
                        ScanKernel::Parallel => {
                            for r in 0..l {
                                let k = l - 1 - r;
                                let gyv = gy[ix(bi, k, ei)];
                                a_next[r] = next(k);
                                src[r] = gyv * cd[jx(bi, k, j)];
                                dc[jx(bi, k, j)] = dc[jx(bi, k, j)] + gyv * h[k];
                            }
                            for (r, v) in blelloch_scan(&a_next, &src).into_iter().enumerate() {
                                lam[l - 1 - r] = v;
                            }
                        }
                    }
                    let mut da_acc = T::zero();
                    for k in 0..l {
                        let lk = lam[k];
                        let dt = dtd[ix(bi, k, ei)];
                        let (abk, phk) = (ab[k], ph[k]);
                        let bk = bd[jx(bi, k, j)];
                        let uk = ud[ix(bi, k, ei)];
                        let h_prev = if k > 0 { h[k - 1] } else { T::zero() };
                        let d_abar = lk * h_prev;
                        let d_phi = lk * bk * uk;
                        ddelta[ix(bi, k, ei)] = ddelta[ix(bi, k, ei)] + (d_abar * aj + d_phi) * abk;
                        da_acc = da_acc + d_abar * dt * abk + d_phi * dt * dt * zoh_g(dt * aj, abk);
                        db[jx(bi, k, j)] = db[jx(bi, k, j)] + lk * phk * uk;
                        du[ix(bi, k, ei)] = du[ix(bi, k, ei)] + lk * phk * bk;
                    }
                    da[ei * n + j] = da[ei * n + j] + da_acc;
                }
            }
        }
        let t = |shape: &[usize], d: Vec<T>| Some(Tensor::new(shape, d).expect("shape"));
        vec![
            t(uv.shape(), du),
            t(dv.shape(), ddelta),
            t(av.shape(), da),
            t(bv.shape(), db),
            t(cv.shape(), dc),
            t(dd.shape(), dd_),
        ]
    })
}

/// Input-dependent projections producing per-step `(Δ, B, C)`:
/// `Δ = softplus(x W_Δ + b_Δ)`, `B = x W_B`, `C = x W_C`.
#[derive(Clone, Debug)]
pub struct SelectiveProjection {
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
}

/// Range the initial timescale `softplus(b_Δ)` is drawn from (log-uniform).
pub const DELTA_INIT_RANGE: (f64, f64) = (0.01, 0.1);

impl SelectiveProjection {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (1.0 / channels as f64).sqrt();
        let (lo, hi) = DELTA_INIT_RANGE;
        let b_delta = Tensor::from_fn(&[channels], |_| {
            let dt = (rng.random_range(lo.ln()..hi.ln())).exp();
            T::of(inverse_softplus(dt))
        });
        Ok(Self {
            w_delta: store.add(
                format!("{prefix}.w_delta"),
                Tensor::randn(&[channels, channels], 0.1 * std, rng),
            )?,
            b_delta: store.add(format!("{prefix}.b_delta"), b_delta)?,
            w_b: store.add(
                format!("{prefix}.w_b"),
                Tensor::randn(&[channels, state_size], std, rng),
            )?,
            w_c: store.add(
                format!("{prefix}.w_c"),
                Tensor::randn(&[channels, state_size], std, rng),
            )?,
        })
    }

    /// `x`: `(B, L, E)` → `(Δ, B, C)` with shapes `(B,L,E)`, `(B,L,N)`, `(B,L,N)`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var, Var)> {
        let pre = g.linear(x, p.var(self.w_delta), Some(p.var(self.b_delta)))?;
        let delta = g.softplus(pre)?;
        let b = g.linear(x, p.var(self.w_b), None)?;
        let c = g.linear(x, p.var(self.w_c), None)?;
        Ok((delta, b, c))
    }
}

/// Diagonal state matrices initialized to `-(1..=N)` for every channel.
pub fn init_state_matrix<T: Scalar>(channels: usize, state_size: usize) -> Tensor<T> {
    Tensor::from_fn(&[channels, state_size], |i| -T::of_usize(i % state_size + 1))
}
