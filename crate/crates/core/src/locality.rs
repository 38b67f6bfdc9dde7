//! Locality branch: rebuild the patch sequence on its 2-D slide grid,
//! run a depthwise convolution with a learnable pad token, read the
//! sequence back out, and fuse it with the trunk.

use std::collections::HashMap;

use crate::array::{self, NumArray};
use crate::error::{Error, Result};

/// Grid position of a patch, in patch units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coord {
    pub row: u32,
    pub col: u32,
}

impl Coord {
    pub fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

/// Shift coordinates so the minimum row and column are zero.
pub fn normalize_coords(coords: &[Coord]) -> Vec<Coord> {
    let r0 = coords.iter().map(|c| c.row).min().unwrap_or(0);
    let c0 = coords.iter().map(|c| c.col).min().unwrap_or(0);
    coords.iter().map(|c| Coord::new(c.row - r0, c.col - c0)).collect()
}

/// Grid extents plus the flat cell index of every patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<usize>,
}

impl GridLayout {
    pub fn new(coords: &[Coord]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyBag);
        }
        let height = coords.iter().map(|c| c.row as usize).max().unwrap_or(0) + 1;
        let width = coords.iter().map(|c| c.col as usize).max().unwrap_or(0) + 1;
        let mut seen: HashMap<Coord, usize> = HashMap::with_capacity(coords.len());
        let mut cells = Vec::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            if let Some(&first) = seen.get(c) {
                return Err(Error::DuplicateCoord { row: c.row, col: c.col, first, second: i });
            }
            seen.insert(*c, i);
            cells.push(c.row as usize * width + c.col as usize);
        }
        if height * width > 64 * coords.len() {
            log::warn!(
                "sparse patch grid: {height}x{width} cells for {} patches, materializing densely",
                coords.len()
            );
        }
        Ok(Self { height, width, cells })
    }

    pub fn n_cells(&self) -> usize {
        self.height * self.width
    }
}

/// Dense `height × width × d` feature map with an occupancy mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub cells: NumArray,
    pub mask: Vec<bool>,
}

impl PatchGrid {
    pub fn channels(&self) -> usize {
        self.cells.shape()[2]
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let d = self.channels();
        &self.cells.data()[(row * self.width + col) * d..(row * self.width + col + 1) * d]
    }
}

/// Scatter patch rows onto their grid cells; every other cell holds `pad`.
pub fn reconstruct_2d(z: &NumArray, coords: &[Coord], pad: &NumArray) -> Result<PatchGrid> {
    if z.rows() != coords.len() {
        return Err(Error::LengthMismatch { what: "coords", got: coords.len(), expected: z.rows() });
    }
    let d = z.cols();
    if pad.len() != d {
        return Err(Error::ShapeMismatch { op: "reconstruct_2d", left: z.shape().to_vec(), right: pad.shape().to_vec() });
    }
    let layout = GridLayout::new(coords)?;
    let mut data = pad.data().repeat(layout.n_cells());
    let mut mask = vec![false; layout.n_cells()];
    for (i, &cell) in layout.cells.iter().enumerate() {
        data[cell * d..(cell + 1) * d].copy_from_slice(z.row(i));
        mask[cell] = true;
    }
    Ok(PatchGrid {
        height: layout.height,
        width: layout.width,
        cells: NumArray::from_parts(vec![layout.height, layout.width, d], data),
        mask,
    })
}

/// Depthwise same-size correlation with `kernels[d × kh × kw]`; taps that
/// land outside the grid read the pad token.
pub fn depthwise_conv2d(grid: &PatchGrid, kernels: &NumArray, pad: &NumArray) -> Result<PatchGrid> {
    let d = grid.channels();
    let ks = kernels.shape();
    if ks.len() != 3 || ks[0] != d || pad.len() != d {
        return Err(Error::ShapeMismatch { op: "depthwise_conv2d", left: grid.cells.shape().to_vec(), right: ks.to_vec() });
    }
    if ks[1].is_multiple_of(2) || ks[2].is_multiple_of(2) {
        return Err(Error::EvenKernel { kh: ks[1], kw: ks[2] });
    }
    let out = array::dwconv2d_forward(grid.cells.data(), grid.height, grid.width, d, kernels.data(), ks[1], ks[2], pad.data());
    Ok(PatchGrid {
        height: grid.height,
        width: grid.width,
        cells: NumArray::from_parts(vec![grid.height, grid.width, d], out),
        mask: grid.mask.clone(),
    })
}

/// Read rows back out of the grid in `coords` order.
pub fn extract_2d(grid: &PatchGrid, coords: &[Coord]) -> Result<NumArray> {
    let d = grid.channels();
    let mut data = Vec::with_capacity(coords.len() * d);
    for (index, c) in coords.iter().enumerate() {
        if c.row as usize >= grid.height || c.col as usize >= grid.width {
            return Err(Error::CoordOutOfGrid { index, row: c.row, col: c.col, height: grid.height, width: grid.width });
        }
        data.extend_from_slice(grid.cell(c.row as usize, c.col as usize));
    }
    Ok(NumArray::from_parts(vec![coords.len(), d], data))
}

/// `H = Z + tanh(λ) · Z_local`.
pub fn lambda_fuse(z: &NumArray, z_local: &NumArray, lambda: f64) -> Result<NumArray> {
    if z.shape() != z_local.shape() {
        return Err(Error::ShapeMismatch { op: "lambda_fuse", left: z.shape().to_vec(), right: z_local.shape().to_vec() });
    }
    let t = lambda.tanh();
    let data = z.data().iter().zip(z_local.data()).map(|(a, b)| a + t * b).collect();
    Ok(NumArray::from_parts(z.shape().to_vec(), data))
}

/// Depthwise causal convolution along the sequence, `kernel[d × w]`,
/// zero left padding; the last tap is the current token.
pub fn short_conv1d(x: &NumArray, kernel: &NumArray) -> Result<NumArray> {
    let d = x.cols();
    if kernel.shape().len() != 2 || kernel.rows() != d {
        return Err(Error::ShapeMismatch { op: "short_conv1d", left: x.shape().to_vec(), right: kernel.shape().to_vec() });
    }
    let out = array::causal_conv1d_forward(x.data(), x.rows(), d, kernel.data(), kernel.cols());
    Ok(NumArray::from_parts(vec![x.rows(), d], out))
}

/// `G = σ(H W_g + b_g)`, `O = G ⊙ H_global + (1 − G) ⊙ H_local`.
/// Returns `(O, G)`.
pub fn output_gate_fuse(
    h: &NumArray,
    h_global: &NumArray,
    h_local: &NumArray,
    w_g: &NumArray,
    bias_g: &NumArray,
) -> Result<(NumArray, NumArray)> {
    if h_global.shape() != h_local.shape() {
        return Err(Error::ShapeMismatch { op: "output_gate_fuse", left: h_global.shape().to_vec(), right: h_local.shape().to_vec() });
    }
    let mut gate = h.matmul(w_g)?;
    if gate.shape() != h_global.shape() || bias_g.len() != gate.cols() {
        return Err(Error::ShapeMismatch { op: "output_gate_fuse", left: gate.shape().to_vec(), right: h_global.shape().to_vec() });
    }
    for r in 0..gate.rows() {
        gate.row_mut(r).iter_mut().zip(bias_g.data()).for_each(|(x, b)| *x = array::sigmoid(*x + b));
    }
    let data = gate
        .data()
        .iter()
        .zip(h_global.data().iter().zip(h_local.data()))
        .map(|(g, (hg, hl))| g * hg + (1.0 - g) * hl)
        .collect();
    Ok((NumArray::from_parts(h_global.shape().to_vec(), data), gate))
}
