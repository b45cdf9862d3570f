//! Four-direction 2-D selective scan with a learnable boundary token.
//!
//! A `(B,H,W,C)` map is surrounded by a one-pixel border holding the pad
//! token, unfolded into four sequences of length `(H+2)(W+2)`, scanned with
//! independent selective SSMs, folded back, summed in direction order and
//! cropped to `H×W`.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::{init_state_matrix, selective_scan, ScanKernel, SelectiveProjection};
use crate::tensor::Tensor;

pub const DIRECTIONS: usize = 4;

/// Scan orders over a `rows × cols` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Row-major, left to right, top to bottom.
    RowMajor,
    /// Column-major, top to bottom, left to right.
    ColMajor,
    RowMajorReversed,
    ColMajorReversed,
}

impl Direction {
    pub const ALL: [Direction; DIRECTIONS] = [
        Direction::RowMajor,
        Direction::ColMajor,
        Direction::RowMajorReversed,
        Direction::ColMajorReversed,
    ];

    /// `order[i]` is the flat grid index `row * cols + col` visited at step `i`.
    pub fn order(self, rows: usize, cols: usize) -> Vec<usize> {
        let row_major = || (0..rows * cols).collect::<Vec<_>>();
        let col_major = || {
            (0..cols)
                .flat_map(|c| (0..rows).map(move |r| r * cols + c))
                .collect::<Vec<_>>()
        };
        match self {
            Direction::RowMajor => row_major(),
            Direction::ColMajor => col_major(),
            Direction::RowMajorReversed => row_major().into_iter().rev().collect(),
            Direction::ColMajorReversed => col_major().into_iter().rev().collect(),
        }
    }
}

/// Inverse of a permutation.
pub fn invert(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &p) in order.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// A feature map with its one-pixel token border; the interior starts at
/// `(1, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct PaddedGrid {
    pub grid: Var,
    pub rows: usize,
    pub cols: usize,
}

impl PaddedGrid {
    pub const INTERIOR_ORIGIN: (usize, usize) = (1, 1);
}

/// Pads `f` with `pad_token` (zeros when `None`).
pub fn pad_with_tokens<T: Scalar>(g: &Graph<T>, f: Var, pad_token: Option<Var>) -> Result<PaddedGrid> {
    let [_, h, w, _] = g.value(f).dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("pad_with_tokens", "empty feature map"));
    }
    Ok(PaddedGrid {
        grid: g.pad_border(f, pad_token)?,
        rows: h + 2,
        cols: w + 2,
    })
}

/// The four direction-ordered sequences `(B, L, C)` of a grid plus the
/// maps from sequence position to flat grid index.
#[derive(Clone, Debug)]
pub struct ScanBundle {
    pub sequences: [Var; DIRECTIONS],
    pub index_maps: [Rc<Vec<usize>>; DIRECTIONS],
    pub rows: usize,
    pub cols: usize,
}

impl ScanBundle {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid `(row, col)` of step `i` in direction `d`.
    pub fn position(&self, d: usize, i: usize) -> (usize, usize) {
        let p = self.index_maps[d][i];
        (p / self.cols, p % self.cols)
    }
}

/// Unfolds any `(B, rows, cols, C)` map into the four scan orders.
pub fn unfold_grid<T: Scalar>(g: &Graph<T>, grid: Var) -> Result<ScanBundle> {
    let [_, rows, cols, _] = g.value(grid).dims4()?;
    let index_maps = Direction::ALL.map(|d| Rc::new(d.order(rows, cols)));
    let mut sequences = [grid; DIRECTIONS];
    for (s, map) in sequences.iter_mut().zip(&index_maps) {
        *s = g.gather_rows(grid, Rc::clone(map))?;
    }
    Ok(ScanBundle {
        sequences,
        index_maps,
        rows,
        cols,
    })
}

pub fn unfold_four_directions<T: Scalar>(g: &Graph<T>, pg: &PaddedGrid) -> Result<ScanBundle> {
    unfold_grid(g, pg.grid)
}

/// Folds one direction's `(B, L, C)` output back to `(B, rows, cols, C)`.
pub fn fold_direction<T: Scalar>(g: &Graph<T>, bundle: &ScanBundle, d: usize, seq: Var) -> Result<Var> {
    let v = g.value(seq);
    let [b, l, c] = *v.shape() else {
        return Err(Error::shape("fold_direction", format!("{:?}", v.shape())));
    };
    if l != bundle.len() {
        return Err(Error::shape(
            "fold_direction",
            format!("sequence length {l} for a {}x{} grid", bundle.rows, bundle.cols),
        ));
    }
    let inv = Rc::new(invert(&bundle.index_maps[d]));
    let grid = g.gather_rows(seq, inv)?;
    g.reshape(grid, &[b, bundle.rows, bundle.cols, c])
}

/// Folds the four outputs, sums them in direction order and, when `crop`
/// is set, removes the border.
pub fn merge_directions<T: Scalar>(
    g: &Graph<T>,
    bundle: &ScanBundle,
    outputs: &[Var; DIRECTIONS],
    crop: bool,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (d, &out) in outputs.iter().enumerate() {
        let folded = fold_direction(g, bundle, d, out)?;
        acc = Some(match acc {
            None => folded,
            Some(a) => g.add(a, folded)?,
        });
    }
    let merged = acc.expect("four directions");
    if crop {
        g.crop_border(merged)
    } else {
        Ok(merged)
    }
}

/// Selective SSM weights for one scan direction.
#[derive(Clone, Debug)]
pub struct DirectionSsm {
    pub proj: SelectiveProjection,
    pub a: ParamId,
    pub d: ParamId,
}

impl DirectionSsm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            proj: SelectiveProjection::new(store, &format!("{prefix}.proj"), channels, state_size, rng)?,
            a: store.add(format!("{prefix}.a"), init_state_matrix(channels, state_size))?,
            d: store.add(format!("{prefix}.d"), Tensor::ones(&[channels]))?,
        })
    }

    /// `(B, L, C)` → `(B, L, C)`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, seq: Var, kernel: ScanKernel) -> Result<Var> {
        let (delta, b, c) = self.proj.forward(g, p, seq)?;
        selective_scan(g, seq, delta, p.var(self.a), b, c, p.var(self.d), kernel)
    }
}

/// Scans every direction with its own SSM and merges the results.
pub fn scan_and_merge<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    bundle: &ScanBundle,
    ssms: &[DirectionSsm; DIRECTIONS],
    kernel: ScanKernel,
    crop: bool,
) -> Result<Var> {
    let mut outs = bundle.sequences;
    for (o, ssm) in outs.iter_mut().zip(ssms) {
        *o = ssm.forward(g, p, *o, kernel)?;
    }
    merge_directions(g, bundle, &outs, crop)
}

/// The full padded four-direction scan module.
#[derive(Clone, Debug)]
pub struct Scan2d {
    pub dirs: [DirectionSsm; DIRECTIONS],
    /// `None` disables the token border: the scan then runs directly on the
    /// `H×W` grid.
    pub pad_token: Option<ParamId>,
    pub channels: usize,
    pub kernel: ScanKernel,
}

impl Scan2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state_size: usize,
        padding_tokens: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut make = |d: usize| DirectionSsm::new(store, &format!("{prefix}.dir{d}"), channels, state_size, rng);
        let dirs = [make(0)?, make(1)?, make(2)?, make(3)?];
        let pad_token = if padding_tokens {
            Some(store.add(format!("{prefix}.pad_token"), Tensor::randn(&[channels], 0.02, rng))?)
        } else {
            None
        };
        Ok(Self {
            dirs,
            pad_token,
            channels,
            kernel: ScanKernel::default(),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        let c = g.value(f).dims4()?[3];
        if c != self.channels {
            return Err(Error::Config(format!(
                "2-D scan built for {} channels, got {c}",
                self.channels
            )));
        }
        match self.pad_token {
            Some(tok) => {
                let pg = pad_with_tokens(g, f, Some(p.var(tok)))?;
                let bundle = unfold_four_directions(g, &pg)?;
                scan_and_merge(g, p, &bundle, &self.dirs, self.kernel, true)
            }
            None => {
                let bundle = unfold_grid(g, f)?;
                scan_and_merge(g, p, &bundle, &self.dirs, self.kernel, false)
            }
        }
    }
}
