//! Retrieval evaluation and embedding-space generalization diagnostics:
//! Recall@K, embedding space density (mean intra-class over mean inter-class
//! distance, higher is better on unseen classes) and spectral decay (KL
//! divergence from the uniform distribution to the normalized singular-value
//! spectrum, lower is better).
//!
//! Everything here is a pure read-only function of its inputs; reports
//! serialize to a flat key=value text block.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{singular_values, Tensor};

const SPECTRUM_SMOOTHING: f64 = 1e-12;

/// Recall@K for a list of cutoffs.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub recalls: Vec<f64>,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recalls[i])
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, r) in self.ks.iter().zip(&self.recalls) {
            let _ = writeln!(out, "recall@{k}={r}");
        }
        out
    }
}

/// Intra/inter class distance statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub d_intra: f64,
    pub d_inter: f64,
    pub density: f64,
}

impl DensityReport {
    pub fn to_kv(&self) -> String {
        format!(
            "d_intra={}\nd_inter={}\ndensity={}\n",
            self.d_intra, self.d_inter, self.density
        )
    }
}

/// Normalized singular-value spectrum and its KL divergence from uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub spectrum: Vec<f64>,
    pub rho: f64,
}

impl SpectralReport {
    pub fn to_kv(&self) -> String {
        let spectrum = self
            .spectrum
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!("rho={}\nspectrum={spectrum}\n", self.rho)
    }
}

fn check_embedding_batch(embeddings: &[Vec<f64>], labels: Option<&[usize]>) -> Result<usize> {
    if embeddings.is_empty() {
        return Err(Error::InsufficientData {
            what: "embeddings",
            needed: 1,
            have: 0,
        });
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::InvalidParameter(
            "embeddings must share one dimension".into(),
        ));
    }
    if let Some(labels) = labels {
        if labels.len() != embeddings.len() {
            return Err(Error::LengthMismatch {
                context: "labels vs embeddings",
                lhs: labels.len(),
                rhs: embeddings.len(),
            });
        }
    }
    Ok(d)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na * nb;
    if denom > 0.0 {
        dot / denom
    } else {
        0.0
    }
}

/// Recall@K: for each query, rank all other samples by cosine similarity
/// (ties broken by sample index) and score a hit when the top K contain a
/// same-class sample.
pub fn recall_at_k(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    check_embedding_batch(embeddings, Some(labels))?;
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InsufficientData {
            what: "samples for retrieval",
            needed: 2,
            have: n,
        });
    }
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::InvalidParameter("recall cutoffs must be >= 1".into()));
    }

    let mut hits = vec![0usize; ks.len()];
    for q in 0..n {
        let mut others: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (j, cosine(&embeddings[q], &embeddings[j])))
            .collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (ki, &k) in ks.iter().enumerate() {
            let top = &others[..k.min(others.len())];
            if top.iter().any(|&(j, _)| labels[j] == labels[q]) {
                hits[ki] += 1;
            }
        }
    }
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        recalls: hits.iter().map(|&h| h as f64 / n as f64).collect(),
    })
}

/// Embedding space density: mean Euclidean distance over same-class pairs
/// divided by the mean over cross-class pairs.
pub fn embedding_space_density(
    embeddings: &[Vec<f64>],
    labels: &[usize],
) -> Result<DensityReport> {
    check_embedding_batch(embeddings, Some(labels))?;
    let n = embeddings.len();
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if labels[i] == labels[j] {
                intra.0 += dist;
                intra.1 += 1;
            } else {
                inter.0 += dist;
                inter.1 += 1;
            }
        }
    }
    if intra.1 == 0 {
        return Err(Error::InsufficientData {
            what: "intra-class pairs",
            needed: 1,
            have: 0,
        });
    }
    if inter.1 == 0 {
        return Err(Error::InsufficientData {
            what: "inter-class pairs",
            needed: 1,
            have: 0,
        });
    }
    let d_intra = intra.0 / intra.1 as f64;
    let d_inter = inter.0 / inter.1 as f64;
    let density = if d_intra == 0.0 { 0.0 } else { d_intra / d_inter };
    Ok(DensityReport {
        d_intra,
        d_inter,
        density,
    })
}

/// Spectral decay of a batch of embeddings: the rows are mean-centered, the
/// singular values of the n×d matrix are computed, padded with zeros to
/// length d, smoothed and normalized to a distribution, and compared against
/// uniform via ρ = Σᵢ (1/d)·ln((1/d)/vᵢ).
pub fn spectral_decay(embeddings: &[Vec<f64>]) -> Result<SpectralReport> {
    let d = check_embedding_batch(embeddings, None)?;
    let n = embeddings.len();
    if embeddings.iter().all(|e| e.iter().all(|&v| v == 0.0)) {
        return Err(Error::InvalidParameter(
            "spectral decay of an all-zero embedding matrix".into(),
        ));
    }

    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<f64> = embeddings
        .iter()
        .flat_map(|e| e.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let matrix = Tensor::matrix(n, d, centered)?;
    let svs = singular_values(&matrix)?;
    spectral_report_from_singular_values(&svs, d)
}

/// Spectral report computed directly from a singular-value list; the
/// spectrum is padded with zeros to `dim` entries before smoothing.
pub fn spectral_report_from_singular_values(svs: &[f64], dim: usize) -> Result<SpectralReport> {
    if dim == 0 {
        return Err(Error::InvalidParameter("spectrum dimension must be >= 1".into()));
    }
    if svs.len() > dim {
        return Err(Error::LengthMismatch {
            context: "singular values vs spectrum dimension",
            lhs: svs.len(),
            rhs: dim,
        });
    }
    let mut padded: Vec<f64> = svs.to_vec();
    padded.resize(dim, 0.0);
    let smoothed: Vec<f64> = padded.iter().map(|v| v + SPECTRUM_SMOOTHING).collect();
    let total: f64 = smoothed.iter().sum();
    let spectrum: Vec<f64> = smoothed.iter().map(|v| v / total).collect();
    let uniform = 1.0 / dim as f64;
    let rho: f64 = spectrum.iter().map(|&v| uniform * (uniform / v).ln()).sum();
    Ok(SpectralReport { spectrum, rho })
}
