//! The coded residual transform: prototype correlation, weighted residual
//! encoding, per-prototype embedding heads and their aggregation into one
//! embedding vector per feature map.
//!
//! For a feature map with positions x_j and a prototype c_k, the residual
//! code is r_k = Σ_j log(1+exp(x_jᵀ c_k)) · (x_j − c_k). Each r_k passes
//! through a two-layer head (Linear → GELU → Linear) and the head outputs
//! are averaged.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

const PROTOTYPE_NORM_EPS: f64 = 1e-8;

/// H×W grid of L-dimensional feature vectors.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    /// Row-major: position-major, then feature dimension.
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "feature map extents must be positive, got {height}x{width}x{dim}"
            )));
        }
        if data.len() != height * width * dim {
            return Err(Error::DataLength {
                shape: vec![height, width, dim],
                len: data.len(),
                expected: height * width * dim,
            });
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            data,
        })
    }

    /// Map where every grid cell holds the same vector.
    pub fn constant(height: usize, width: usize, cell: &[f64]) -> Result<Self> {
        let data: Vec<f64> = (0..height * width).flat_map(|_| cell.to_vec()).collect();
        FeatureMap::new(height, width, cell.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector at flat grid position `j` (row-major over the grid).
    pub fn feature(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// View as an (H·W)×L matrix tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.positions(), self.dim, self.data.clone())
            .expect("feature map extents are validated at construction")
    }
}

/// K learnable L-dimensional prototype vectors.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    count: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PrototypeSet {
    pub fn new(count: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "prototype set needs positive extents, got {count}x{dim}"
            )));
        }
        if data.len() != count * dim {
            return Err(Error::DataLength {
                shape: vec![count, dim],
                len: data.len(),
                expected: count * dim,
            });
        }
        let ps = PrototypeSet { count, dim, data };
        ps.validate()?;
        Ok(ps)
    }

    /// Standard Gaussian rows, each scaled to unit norm.
    pub fn random<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal parameters are valid");
        let mut data = vec![0.0; count * dim];
        for k in 0..count {
            let row = &mut data[k * dim..(k + 1) * dim];
            loop {
                for v in row.iter_mut() {
                    *v = normal.sample(rng);
                }
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > PROTOTYPE_NORM_EPS {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
        }
        PrototypeSet::new(count, dim, data)
    }

    fn validate(&self) -> Result<()> {
        for k in 0..self.count {
            let norm = self
                .prototype(k)
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm <= PROTOTYPE_NORM_EPS {
                return Err(Error::DegenerateVector {
                    norm,
                    eps: PROTOTYPE_NORM_EPS,
                });
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// View as a K×L matrix tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.count, self.dim, self.data.clone())
            .expect("prototype extents are validated at construction")
    }

    /// Mean pairwise |cosine| among prototypes; diagnostic counterpart of the
    /// diversity loss, computed without a tape.
    pub fn mean_abs_cosine(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for k in 0..self.count {
            for j in 0..self.count {
                if k == j {
                    continue;
                }
                let (a, b) = (self.prototype(k), self.prototype(j));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                total += (dot / (na * nb)).abs();
            }
        }
        total / (self.count * (self.count - 1)) as f64
    }
}

/// Linear(L→D_h) → GELU → Linear(D_h→D_out), stored row-major.
#[derive(Debug, Clone)]
pub struct EmbeddingHead {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EmbeddingHead {
    pub fn new(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        if w1.len() != hidden_dim * in_dim
            || b1.len() != hidden_dim
            || w2.len() != out_dim * hidden_dim
            || b2.len() != out_dim
        {
            return Err(Error::InvalidParameter(format!(
                "head layer extents do not chain {in_dim} -> {hidden_dim} -> {out_dim}"
            )));
        }
        Ok(EmbeddingHead {
            in_dim,
            hidden_dim,
            out_dim,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Gaussian init scaled by 1/sqrt(fan_in), zero biases.
    pub fn random<R: Rng>(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal parameters are valid");
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        let w1: Vec<f64> = (0..hidden_dim * in_dim)
            .map(|_| normal.sample(rng) * s1)
            .collect();
        let w2: Vec<f64> = (0..out_dim * hidden_dim)
            .map(|_| normal.sample(rng) * s2)
            .collect();
        EmbeddingHead {
            in_dim,
            hidden_dim,
            out_dim,
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; out_dim],
        }
    }

    /// Head realizing the identity map exactly: with W1 = [I; −I] and
    /// W2 = [I, −I], the output is gelu(r) − gelu(−r) = r.
    pub fn identity(dim: usize) -> Self {
        let hidden = 2 * dim;
        let mut w1 = vec![0.0; hidden * dim];
        let mut w2 = vec![0.0; dim * hidden];
        for i in 0..dim {
            w1[i * dim + i] = 1.0;
            w1[(dim + i) * dim + i] = -1.0;
            w2[i * hidden + i] = 1.0;
            w2[i * hidden + dim + i] = -1.0;
        }
        EmbeddingHead {
            in_dim: dim,
            hidden_dim: hidden,
            out_dim: dim,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; dim],
        }
    }
}

/// Hyperparameters of one CRT embedding branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchConfig {
    /// Prototype count K.
    pub prototype_count: usize,
    /// Head hidden width.
    pub hidden_dim: usize,
    /// Embedding dimension.
    pub out_dim: usize,
    /// Distinct head per prototype, or one head shared across all residuals.
    pub per_prototype_heads: bool,
    /// Metric-loss weight λ₁ for this branch.
    pub ms_weight: f64,
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prototype_count == 0 || self.out_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "branch config needs K >= 1, hidden >= 1, out >= 1 (got K={}, hidden={}, out={})",
                self.prototype_count, self.hidden_dim, self.out_dim
            )));
        }
        if self.ms_weight < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "ms_weight must be non-negative, got {}",
                self.ms_weight
            )));
        }
        Ok(())
    }

    pub fn head_count(&self) -> usize {
        if self.per_prototype_heads {
            self.prototype_count
        } else {
            1
        }
    }
}

/// Tape-registered parameters of one head.
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl HeadVars {
    /// Register plain head parameters on a tape.
    pub fn register(tape: &mut Tape, head: &EmbeddingHead, requires_grad: bool) -> Self {
        HeadVars {
            w1: tape.leaf(
                Tensor::matrix(head.hidden_dim, head.in_dim, head.w1.clone())
                    .expect("head extents validated at construction"),
                requires_grad,
            ),
            b1: tape.leaf(
                Tensor::vector(head.b1.clone()).expect("bias is finite"),
                requires_grad,
            ),
            w2: tape.leaf(
                Tensor::matrix(head.out_dim, head.hidden_dim, head.w2.clone())
                    .expect("head extents validated at construction"),
                requires_grad,
            ),
            b2: tape.leaf(
                Tensor::vector(head.b2.clone()).expect("bias is finite"),
                requires_grad,
            ),
        }
    }

    /// Apply the head to one residual vector.
    pub fn apply(&self, tape: &mut Tape, r: &Tensor) -> Result<Tensor> {
        let z1 = tape.matvec(&self.w1, r)?;
        let z1 = tape.add(&z1, &self.b1)?;
        let a = tape.gelu(&z1)?;
        let z2 = tape.matvec(&self.w2, &a)?;
        tape.add(&z2, &self.b2)
    }
}

/// Tape-registered parameters of one branch.
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub config: BranchConfig,
    pub prototypes: Tensor,
    pub heads: Vec<HeadVars>,
}

/// Raw correlations x_jᵀ c_k as a K×H×W tensor, before any weighting.
pub fn correlation_map(fm: &FeatureMap, ps: &PrototypeSet) -> Result<Tensor> {
    if fm.dim() != ps.dim() {
        return Err(Error::ShapeMismatch {
            op: "correlation_map",
            lhs: vec![fm.height(), fm.width(), fm.dim()],
            rhs: vec![ps.count(), ps.dim()],
        });
    }
    let (k, h, w) = (ps.count(), fm.height(), fm.width());
    let mut out = vec![0.0; k * h * w];
    for kk in 0..k {
        let c = ps.prototype(kk);
        for j in 0..fm.positions() {
            let x = fm.feature(j);
            out[kk * h * w + j] = x.iter().zip(c).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(vec![k, h, w], out)
}

/// Residual codes for every prototype:
/// r_k = Σ_j log(1+exp(x_jᵀ c_k)) · (x_j − c_k), shaped K×L.
///
/// `features` is the (H·W)×L matrix of a feature map, `prototypes` the K×L
/// prototype matrix; both must be attached to the tape.
pub fn encode_residuals(tape: &mut Tape, features: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    let (_, lf) = features.dims2()?;
    let (_, lp) = prototypes.dims2()?;
    if lf != lp {
        return Err(Error::ShapeMismatch {
            op: "encode_residuals",
            lhs: features.shape().to_vec(),
            rhs: prototypes.shape().to_vec(),
        });
    }
    let ct = tape.transpose(prototypes)?;
    let corr = tape.matmul(features, &ct)?; // (HW × K)
    let weights = tape.softplus(&corr)?;
    let weight_sums = tape.col_sum(&weights)?; // (K)
    let wt = tape.transpose(&weights)?; // (K × HW)
    let weighted_features = tape.matmul(&wt, features)?; // (K × L)
    let weighted_protos = tape.scale_rows(prototypes, &weight_sums)?; // (K × L)
    tape.sub(&weighted_features, &weighted_protos)
}

/// Head aggregation: f = (1/K) Σ_k Γ_k(r_k).
///
/// `residuals` is the K×L residual-code matrix. With per-prototype heads the
/// list must hold K heads; otherwise exactly one, applied to every code.
pub fn embed(
    tape: &mut Tape,
    residuals: &Tensor,
    heads: &[HeadVars],
    cfg: &BranchConfig,
) -> Result<Tensor> {
    let (k, _) = residuals.dims2()?;
    if k != cfg.prototype_count {
        return Err(Error::ShapeMismatch {
            op: "embed",
            lhs: residuals.shape().to_vec(),
            rhs: vec![cfg.prototype_count],
        });
    }
    let expected = cfg.head_count();
    if heads.len() != expected {
        return Err(Error::HeadCount {
            expected,
            got: heads.len(),
        });
    }
    let mut acc: Option<Tensor> = None;
    for kk in 0..k {
        let r = tape.row_slice(residuals, kk)?;
        let head = if cfg.per_prototype_heads {
            &heads[kk]
        } else {
            &heads[0]
        };
        let out = head.apply(tape, &r)?;
        acc = Some(match acc {
            Some(prev) => tape.add(&prev, &out)?,
            None => out,
        });
    }
    let summed = acc.expect("K >= 1 is validated by BranchConfig");
    tape.mul_const(&summed, 1.0 / k as f64)
}

/// Full branch forward pass: encode residuals, then embed.
pub fn forward_branch(tape: &mut Tape, features: &Tensor, branch: &BranchVars) -> Result<Tensor> {
    let residuals = encode_residuals(tape, features, &branch.prototypes)?;
    embed(tape, &residuals, &branch.heads, &branch.config)
}
