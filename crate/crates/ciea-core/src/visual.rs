//! Frozen visual featurizer and the trainable projector into the language
//! model's hidden space.
//!
//! The featurizer stands in for a frozen pretrained visual encoder: a fixed
//! seeded affine map plus tanh, so patch features are bounded, deterministic
//! across processes, and carry no gradient. Only the projector is trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Raw per-patch features as loaded from the corpus: `patch_count` rows of
/// `raw_dim` floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PatchGrid {
    patch_count: usize,
    raw_dim: usize,
    values: Vec<f64>,
}

impl PatchGrid {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("a patch grid needs at least one patch"));
        }
        let raw_dim = rows[0].len();
        if raw_dim == 0 {
            return Err(Error::contract("patch rows must be non-empty"));
        }
        let mut values = Vec::with_capacity(rows.len() * raw_dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != raw_dim {
                return Err(Error::contract(format!(
                    "patch {i} has {} features, expected {raw_dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("patch {i} contains non-finite values")));
            }
            values.extend_from_slice(row);
        }
        Ok(PatchGrid {
            patch_count: rows.len(),
            raw_dim,
            values,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.patch_count
    }

    pub fn raw_dim(&self) -> usize {
        self.raw_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.raw_dim..(i + 1) * self.raw_dim]
    }
}

impl TryFrom<Vec<Vec<f64>>> for PatchGrid {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        PatchGrid::new(rows)
    }
}

impl From<PatchGrid> for Vec<Vec<f64>> {
    fn from(grid: PatchGrid) -> Self {
        (0..grid.patch_count()).map(|i| grid.row(i).to_vec()).collect()
    }
}

/// Fixed seeded affine+tanh featurizer; immutable after construction and
/// identical across runs for the same seed.
#[derive(Debug, Clone)]
pub struct FrozenVisualParams {
    weight: Tensor,
    bias: Tensor,
    seed: u64,
}

impl FrozenVisualParams {
    pub fn from_seed(raw_dim: usize, d_clip: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (raw_dim as f64).sqrt();
        let weight = Tensor::randn(vec![raw_dim, d_clip], std, &mut rng);
        let bias = Tensor::randn(vec![d_clip], 0.1, &mut rng);
        FrozenVisualParams { weight, bias, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn raw_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_clip(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Per-patch features: tanh(patch · W + b). Computed outside any tape;
    /// the frozen weights can never receive a gradient.
    pub fn featurize(&self, grid: &PatchGrid) -> Result<Tensor> {
        if grid.raw_dim() != self.raw_dim() {
            return Err(Error::Dimension {
                op: "featurize",
                lhs: vec![grid.patch_count(), grid.raw_dim()],
                rhs: self.weight.shape().to_vec(),
            });
        }
        let (raw_dim, d_clip) = (self.raw_dim(), self.d_clip());
        let w = self.weight.values();
        let b = self.bias.values();
        let mut out = vec![0.0; grid.patch_count() * d_clip];
        for p in 0..grid.patch_count() {
            let row = grid.row(p);
            for j in 0..d_clip {
                let mut s = b[j];
                for t in 0..raw_dim {
                    s += row[t] * w[t * d_clip + j];
                }
                out[p * d_clip + j] = s.tanh();
            }
        }
        Tensor::new(vec![grid.patch_count(), d_clip], out)
    }

    /// Order-independent digest of the frozen weights, used to verify that
    /// training never touches them.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in self.weight.values().iter().chain(self.bias.values()) {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Trainable linear map from featurizer space (`d_clip`) into the language
/// model's hidden space (`d`).
#[derive(Debug, Clone)]
pub struct Projector {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Projector {
    pub fn init(d_clip: usize, d: usize, rng: &mut impl rand::Rng) -> Self {
        let std = (2.0 / (d_clip + d) as f64).sqrt();
        Projector {
            weight: Tensor::randn(vec![d_clip, d], std, rng).with_grad(),
            bias: Tensor::zeros(vec![d]).with_grad(),
        }
    }

    pub fn d_clip(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundProjector {
        BoundProjector {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundProjector) -> Result<()> {
        absorb(&mut self.weight, tape, bound.weight)?;
        absorb(&mut self.bias, tape, bound.bias)
    }

    pub fn walk(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    pub fn walk_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundProjector {
    pub weight: Var,
    pub bias: Var,
}

/// Copies a tape gradient into a parameter tensor, or zeros when the loss
/// did not reach it.
pub(crate) fn absorb(param: &mut Tensor, tape: &Tape, var: Var) -> Result<()> {
    let grad = tape
        .grad(var)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; param.numel()]);
    param.set_grad(grad)
}

/// Rows of `feats` mapped through the projector: feats · W + b.
pub fn project(tape: &mut Tape, feats: Var, proj: &BoundProjector) -> Result<Var> {
    let h = tape.matmul(feats, proj.weight)?;
    tape.add(h, proj.bias)
}
