//! Training objectives: prototype diversity loss, batch cosine-similarity
//! matrices, multi-similarity loss with hard-pair mining, cross-branch
//! consistency loss, and their weighted combination.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Loss weights and multi-similarity hyperparameters.
#[derive(Debug, Clone)]
pub struct LossWeights {
    /// Per-branch metric-loss weight λ₁.
    pub lambda1: Vec<f64>,
    /// Consistency weight λ₂.
    pub lambda2: f64,
    /// Positive-pair sharpness α.
    pub alpha: f64,
    /// Negative-pair sharpness β.
    pub beta: f64,
    /// Similarity margin λ_m.
    pub margin: f64,
    /// Mining slack ε.
    pub mining_eps: f64,
    /// Weight on the diversity term; 1 reproduces the combined loss as
    /// stated, 0 is the ablation knob.
    pub div_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: vec![1.0, 0.1],
            lambda2: 0.9,
            alpha: 2.0,
            beta: 50.0,
            margin: 1.0,
            mining_eps: 0.1,
            div_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "alpha and beta must be positive (got {}, {})",
                self.alpha, self.beta
            )));
        }
        let non_negative = [self.lambda2, self.margin, self.mining_eps, self.div_weight];
        if self.lambda1.iter().any(|v| *v < 0.0) || non_negative.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidParameter(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine-similarity matrix of a batch of embeddings, entry-wise on the tape
/// so the metric and consistency losses can differentiate through it.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<Tensor>, // n², row-major; (j,i) aliases the node of (i,j)
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn node(&self, i: usize, j: usize) -> &Tensor {
        &self.entries[i * self.n + j]
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j].data()[0]
    }

    /// Dense copy of the similarity values.
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|t| t.data()[0]).collect()
    }
}

/// Cosine similarities s_ij = fᵢ·fⱼ / (‖fᵢ‖‖fⱼ‖) for a batch of embeddings.
/// Embeddings are L2-normalized internally; zero embeddings are rejected.
pub fn similarity_matrix(tape: &mut Tape, embeddings: &[Tensor]) -> Result<SimilarityMatrix> {
    if embeddings.is_empty() {
        return Err(Error::InsufficientData {
            what: "embeddings",
            needed: 1,
            have: 0,
        });
    }
    let normalized: Vec<Tensor> = embeddings
        .iter()
        .map(|e| tape.l2_normalize(e))
        .collect::<Result<_>>()?;
    let n = normalized.len();
    let mut entries: Vec<Option<Tensor>> = vec![None; n * n];
    for i in 0..n {
        for j in i..n {
            let s = tape.dot(&normalized[i], &normalized[j])?;
            entries[i * n + j] = Some(s.clone());
            if j != i {
                entries[j * n + i] = Some(s);
            }
        }
    }
    Ok(SimilarityMatrix {
        n,
        entries: entries.into_iter().map(|e| e.expect("filled above")).collect(),
    })
}

/// Prototype diversity loss: mean pairwise |cosine| over distinct prototype
/// pairs, in [0, 1]. A single-prototype set has no pairs and scores 0.
pub fn diversity_loss(tape: &mut Tape, prototypes: &Tensor) -> Result<Tensor> {
    let (k, _) = prototypes.dims2()?;
    if k < 2 {
        log::warn!("diversity loss needs K >= 2 prototypes, got {k}; returning 0");
        return tape.constant_scalar(0.0);
    }
    let rows: Vec<Tensor> = (0..k)
        .map(|i| {
            let row = tape.row_slice(prototypes, i)?;
            tape.l2_normalize(&row)
        })
        .collect::<Result<_>>()?;
    let mut acc: Option<Tensor> = None;
    for i in 0..k {
        for j in (i + 1)..k {
            let cos = tape.dot(&rows[i], &rows[j])?;
            let a = tape.abs(&cos)?;
            acc = Some(match acc {
                Some(prev) => tape.add(&prev, &a)?,
                None => a,
            });
        }
    }
    let total = acc.expect("K >= 2 has at least one pair");
    // Each unordered pair appears twice in the k≠j double sum.
    tape.mul_const(&total, 2.0 / (k * (k - 1)) as f64)
}

/// Multi-similarity loss with hard-pair mining.
///
/// Per anchor i, positives with s_ip below the hardest-negative similarity
/// plus ε and negatives with s_ik above the easiest-positive similarity
/// minus ε are selected; when an anchor has no counterpart pairs the mining
/// inequality is vacuous and the whole set on the other side is kept. Each
/// side contributes a soft log-sum-exp term scaled by 1/α or 1/β.
pub fn ms_loss(
    tape: &mut Tape,
    sim: &SimilarityMatrix,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Tensor> {
    let n = sim.size();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            context: "ms_loss labels vs batch",
            lhs: labels.len(),
            rhs: n,
        });
    }
    w.validate()?;

    let mut anchor_terms: Vec<Tensor> = Vec::new();
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        let negatives: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[i]).collect();

        let mined_pos: Vec<usize> = if negatives.is_empty() {
            positives.clone()
        } else {
            let hardest_neg = negatives
                .iter()
                .map(|&k| sim.value(i, k))
                .fold(f64::NEG_INFINITY, f64::max);
            positives
                .iter()
                .copied()
                .filter(|&p| sim.value(i, p) < hardest_neg + w.mining_eps)
                .collect()
        };
        let mined_neg: Vec<usize> = if positives.is_empty() {
            negatives.clone()
        } else {
            let easiest_pos = positives
                .iter()
                .map(|&p| sim.value(i, p))
                .fold(f64::INFINITY, f64::min);
            negatives
                .iter()
                .copied()
                .filter(|&k| sim.value(i, k) > easiest_pos - w.mining_eps)
                .collect()
        };

        // (1/α) log(1 + Σ_p exp(−α(s_ip − margin)))
        if !mined_pos.is_empty() {
            let mut sum: Option<Tensor> = None;
            for p in mined_pos {
                let shifted = tape.add_const(sim.node(i, p), -w.margin)?;
                let scaled = tape.mul_const(&shifted, -w.alpha)?;
                let e = tape.exp(&scaled)?;
                sum = Some(match sum {
                    Some(prev) => tape.add(&prev, &e)?,
                    None => e,
                });
            }
            let inner = tape.add_const(&sum.expect("non-empty"), 1.0)?;
            let logged = tape.ln(&inner)?;
            let term = tape.mul_const(&logged, 1.0 / w.alpha)?;
            anchor_terms.push(term);
        }

        // (1/β) log(1 + Σ_k exp(β(s_ik − margin)))
        if !mined_neg.is_empty() {
            let mut sum: Option<Tensor> = None;
            for k in mined_neg {
                let shifted = tape.add_const(sim.node(i, k), -w.margin)?;
                let scaled = tape.mul_const(&shifted, w.beta)?;
                let e = tape.exp(&scaled)?;
                sum = Some(match sum {
                    Some(prev) => tape.add(&prev, &e)?,
                    None => e,
                });
            }
            let inner = tape.add_const(&sum.expect("non-empty"), 1.0)?;
            let logged = tape.ln(&inner)?;
            let term = tape.mul_const(&logged, 1.0 / w.beta)?;
            anchor_terms.push(term);
        }
    }

    match anchor_terms.into_iter().try_fold(None::<Tensor>, |acc, t| {
        Ok::<_, Error>(Some(match acc {
            Some(prev) => tape.add(&prev, &t)?,
            None => t,
        }))
    })? {
        Some(total) => tape.mul_const(&total, 1.0 / n as f64),
        None => tape.constant_scalar(0.0),
    }
}

/// Cross-branch consistency: mean entry-wise |s1_ij − s2_ij| over all n²
/// entries, diagonal included (its difference is identically zero).
pub fn consistency_loss(
    tape: &mut Tape,
    s1: &SimilarityMatrix,
    s2: &SimilarityMatrix,
) -> Result<Tensor> {
    let n = s1.size();
    if s2.size() != n {
        return Err(Error::LengthMismatch {
            context: "consistency_loss matrix sizes",
            lhs: n,
            rhs: s2.size(),
        });
    }
    let mut acc: Option<Tensor> = None;
    for i in 0..n {
        for j in 0..n {
            let d = tape.sub(s1.node(i, j), s2.node(i, j))?;
            let a = tape.abs(&d)?;
            acc = Some(match acc {
                Some(prev) => tape.add(&prev, &a)?,
                None => a,
            });
        }
    }
    let total = acc.expect("n >= 1");
    tape.mul_const(&total, 1.0 / (n * n) as f64)
}

/// Combined objective: Σ_b div_weight·L_DIV⁽ᵇ⁾ + Σ_b λ₁⁽ᵇ⁾·L_MS⁽ᵇ⁾ + λ₂·L_CON.
///
/// `consistency` is absent for single-branch models. Terms with zero weight
/// are left off the graph entirely so they cannot contribute gradient.
pub fn total_loss(
    tape: &mut Tape,
    branch_ms: &[Tensor],
    branch_div: &[Tensor],
    consistency: Option<&Tensor>,
    w: &LossWeights,
) -> Result<Tensor> {
    if branch_ms.len() != branch_div.len() {
        return Err(Error::LengthMismatch {
            context: "total_loss ms vs div terms",
            lhs: branch_ms.len(),
            rhs: branch_div.len(),
        });
    }
    if w.lambda1.len() < branch_ms.len() {
        return Err(Error::LengthMismatch {
            context: "total_loss lambda1 vs branches",
            lhs: w.lambda1.len(),
            rhs: branch_ms.len(),
        });
    }
    let mut acc: Option<Tensor> = None;
    let mut push = |tape: &mut Tape, t: Tensor| -> Result<()> {
        acc = Some(match acc.take() {
            Some(prev) => tape.add(&prev, &t)?,
            None => t,
        });
        Ok(())
    };
    for div in branch_div {
        if w.div_weight != 0.0 {
            let scaled = tape.mul_const(div, w.div_weight)?;
            push(tape, scaled)?;
        }
    }
    for (b, ms) in branch_ms.iter().enumerate() {
        if w.lambda1[b] != 0.0 {
            let scaled = tape.mul_const(ms, w.lambda1[b])?;
            push(tape, scaled)?;
        }
    }
    if let Some(con) = consistency {
        if w.lambda2 != 0.0 {
            let scaled = tape.mul_const(con, w.lambda2)?;
            push(tape, scaled)?;
        }
    }
    match acc {
        Some(total) => Ok(total),
        None => tape.constant_scalar(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf_vecs(tape: &mut Tape, vecs: &[Vec<f64>], grad: bool) -> Vec<Tensor> {
        vecs.iter()
            .map(|v| tape.leaf(Tensor::vector(v.clone()).unwrap(), grad))
            .collect()
    }

    fn run_diversity(prototypes: &[Vec<f64>]) -> f64 {
        let l = prototypes[0].len();
        let mut tape = Tape::new();
        let p = tape.leaf(
            Tensor::matrix(prototypes.len(), l, prototypes.concat()).unwrap(),
            true,
        );
        diversity_loss(&mut tape, &p).unwrap().item().unwrap()
    }

    // ── diversity ────────────────────────────────────────────────────

    #[test]
    fn diversity_orthogonal_parallel_and_oblique() {
        assert!(run_diversity(&[vec![1.0, 0.0], vec![0.0, 1.0]]).abs() < 1e-15);
        assert!((run_diversity(&[vec![1.0, 0.0], vec![2.0, 0.0]]) - 1.0).abs() < 1e-15);
        // Frozen from the scalar cosine oracle: cos(45°) = 1/√2.
        let got = run_diversity(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert!((got - 0.707107).abs() < 5e-7, "{got}");
    }

    #[test]
    fn diversity_single_prototype_is_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(), true);
        let d = diversity_loss(&mut tape, &p).unwrap();
        assert_eq!(d.item().unwrap(), 0.0);
    }

    #[test]
    fn diversity_rejects_zero_prototype() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap(), true);
        assert!(diversity_loss(&mut tape, &p).is_err());
    }

    #[test]
    fn diversity_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let k = rng.gen_range(2..=6);
            let l = rng.gen_range(1..=5);
            let protos: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    loop {
                        let v: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
                        if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3 {
                            return v;
                        }
                    }
                })
                .collect();
            let got = run_diversity(&protos);

            let mut expect = 0.0;
            for a in 0..k {
                for b in 0..k {
                    if a == b {
                        continue;
                    }
                    let dot: f64 = protos[a].iter().zip(&protos[b]).map(|(x, y)| x * y).sum();
                    let na: f64 = protos[a].iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = protos[b].iter().map(|x| x * x).sum::<f64>().sqrt();
                    expect += (dot / (na * nb)).abs();
                }
            }
            expect /= (k * (k - 1)) as f64;
            assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        }
    }

    // ── similarity matrix ────────────────────────────────────────────

    #[test]
    fn similarity_diagonal_is_one() {
        let mut tape = Tape::new();
        let e = leaf_vecs(
            &mut tape,
            &[vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, -1.0]],
            false,
        );
        let sim = similarity_matrix(&mut tape, &e).unwrap();
        for i in 0..3 {
            assert!((sim.value(i, i) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn similarity_sixty_degrees() {
        // e1=[1,0], e2=[1,√3] → cos 60° = 0.5.
        let mut tape = Tape::new();
        let e = leaf_vecs(
            &mut tape,
            &[vec![1.0, 0.0], vec![1.0, 3.0f64.sqrt()]],
            false,
        );
        let sim = similarity_matrix(&mut tape, &e).unwrap();
        assert!((sim.value(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_scale_invariance() {
        let mut tape = Tape::new();
        let e = leaf_vecs(&mut tape, &[vec![0.4, -0.9], vec![2.0, -4.5]], false);
        let sim = similarity_matrix(&mut tape, &e).unwrap();
        assert!((sim.value(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_rejects_zero_embedding() {
        let mut tape = Tape::new();
        let e = leaf_vecs(&mut tape, &[vec![1.0, 0.0], vec![0.0, 0.0]], false);
        assert!(similarity_matrix(&mut tape, &e).is_err());
    }

    #[test]
    fn similarity_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let vecs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut tape = Tape::new();
        let e = leaf_vecs(&mut tape, &vecs, false);
        let sim = similarity_matrix(&mut tape, &e).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((sim.value(i, j) - sim.value(j, i)).abs() < 1e-10);
                assert!(sim.value(i, j).abs() <= 1.0 + 1e-10);
            }
        }
    }

    // ── ms loss ──────────────────────────────────────────────────────

    fn run_ms(embeddings: &[Vec<f64>], labels: &[usize], w: &LossWeights) -> f64 {
        let mut tape = Tape::new();
        let e = leaf_vecs(&mut tape, embeddings, true);
        let sim = similarity_matrix(&mut tape, &e).unwrap();
        ms_loss(&mut tape, &sim, labels, w).unwrap().item().unwrap()
    }

    /// Literal two-loop mining + summation oracle over a similarity matrix.
    fn ms_oracle(sims: &[Vec<f64>], labels: &[usize], w: &LossWeights) -> f64 {
        let n = labels.len();
        let mut total = 0.0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n)
                .filter(|&p| p != i && labels[p] == labels[i])
                .collect();
            let neg: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[i]).collect();
            let mined_pos: Vec<usize> = if neg.is_empty() {
                pos.clone()
            } else {
                let hn = neg.iter().map(|&k| sims[i][k]).fold(f64::NEG_INFINITY, f64::max);
                pos.iter().copied().filter(|&p| sims[i][p] < hn + w.mining_eps).collect()
            };
            let mined_neg: Vec<usize> = if pos.is_empty() {
                neg.clone()
            } else {
                let ep = pos.iter().map(|&p| sims[i][p]).fold(f64::INFINITY, f64::min);
                neg.iter().copied().filter(|&k| sims[i][k] > ep - w.mining_eps).collect()
            };
            if !mined_pos.is_empty() {
                let s: f64 = mined_pos
                    .iter()
                    .map(|&p| (-w.alpha * (sims[i][p] - w.margin)).exp())
                    .sum();
                total += (1.0 + s).ln() / w.alpha;
            }
            if !mined_neg.is_empty() {
                let s: f64 = mined_neg
                    .iter()
                    .map(|&k| (w.beta * (sims[i][k] - w.margin)).exp())
                    .sum();
                total += (1.0 + s).ln() / w.beta;
            }
        }
        total / n as f64
    }

    #[test]
    fn ms_single_sample_is_zero() {
        let w = LossWeights::default();
        assert_eq!(run_ms(&[vec![1.0, 0.0]], &[0], &w), 0.0);
    }

    #[test]
    fn ms_two_positives_worked_example() {
        // s12 = 0.5 at 60°, α=2, margin=1, no negatives:
        // per anchor (1/2)·ln(1 + e^{−2(0.5−1)}) = 0.5·ln(1+e) ≈ 0.656631.
        let w = LossWeights {
            alpha: 2.0,
            margin: 1.0,
            ..LossWeights::default()
        };
        let got = run_ms(
            &[vec![1.0, 0.0], vec![1.0, 3.0f64.sqrt()]],
            &[7, 7],
            &w,
        );
        assert!((got - 0.656631).abs() < 5e-7, "{got}");
    }

    #[test]
    fn ms_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let w = LossWeights::default();
        for _ in 0..100 {
            let n = rng.gen_range(2..=10);
            let d = rng.gen_range(2..=4);
            let embeddings: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    loop {
                        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                        if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3 {
                            return v;
                        }
                    }
                })
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();

            let got = run_ms(&embeddings, &labels, &w);

            // Scalar cosine similarities for the oracle.
            let mut sims = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| a * b).sum();
                    let ni: f64 = embeddings[i].iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nj: f64 = embeddings[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                    sims[i][j] = dot / (ni * nj);
                }
            }
            let expect = ms_oracle(&sims, &labels, &w);
            assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
        }
    }

    #[test]
    fn ms_invariant_under_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let embeddings: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let labels = vec![0, 0, 1, 1, 2, 2, 0, 1];
        let renamed = vec![5, 5, 9, 9, 4, 4, 5, 9];
        let w = LossWeights::default();
        let a = run_ms(&embeddings, &labels, &w);
        let b = run_ms(&embeddings, &renamed, &w);
        assert_eq!(a, b);
    }

    #[test]
    fn ms_monotone_in_negative_similarity() {
        // Raising one negative pair's similarity never decreases the loss.
        let w = LossWeights::default();
        let base = vec![
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
        ];
        let labels = vec![0, 0, 1];
        let loss_before = run_ms(&base, &labels, &w);
        // Rotate the negative toward the anchors.
        let closer = vec![
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.5, 0.866],
        ];
        let loss_after = run_ms(&closer, &labels, &w);
        assert!(loss_after >= loss_before);
    }

    #[test]
    fn ms_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let w = LossWeights::default();
        let n = 6;
        let d = 3;
        let flat: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let labels = vec![0, 0, 1, 1, 2, 2];

        let eval = |flat: &[f64]| -> f64 {
            let vecs: Vec<Vec<f64>> = flat.chunks(d).map(|c| c.to_vec()).collect();
            run_ms(&vecs, &labels, &w)
        };

        let mut tape = Tape::new();
        let e: Vec<Tensor> = flat
            .chunks(d)
            .map(|c| tape.leaf(Tensor::vector(c.to_vec()).unwrap(), true))
            .collect();
        let sim = similarity_matrix(&mut tape, &e).unwrap();
        let loss = ms_loss(&mut tape, &sim, &labels, &w).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let step = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        for s in 0..n {
            let ad = grads.get(&e[s]).unwrap();
            for i in 0..d {
                let idx = s * d + i;
                let mut plus = flat.clone();
                plus[idx] += step;
                let mut minus = flat.clone();
                minus[idx] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                assert!(rel(ad[i], fd) < 1e-4, "grad[{s}][{i}]: {} vs {fd}", ad[i]);
            }
        }
    }

    // ── consistency ──────────────────────────────────────────────────

    fn sim_from(tape: &mut Tape, vecs: &[Vec<f64>]) -> SimilarityMatrix {
        let e = leaf_vecs(tape, vecs, true);
        similarity_matrix(tape, &e).unwrap()
    }

    #[test]
    fn consistency_identical_is_zero_and_symmetric() {
        let mut tape = Tape::new();
        let a = sim_from(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = sim_from(&mut tape, &[vec![2.0, 0.0], vec![0.0, 5.0]]);
        let z = consistency_loss(&mut tape, &a, &b).unwrap();
        assert!(z.item().unwrap().abs() < 1e-12);

        let c = sim_from(&mut tape, &[vec![1.0, 0.0], vec![1.0, 1.0]]);
        let ab = consistency_loss(&mut tape, &a, &c).unwrap().item().unwrap();
        let ba = consistency_loss(&mut tape, &c, &a).unwrap().item().unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn consistency_worked_example() {
        // s1 = I₂ pattern, s2 has 0.5 off-diagonal → mean |diff| = 0.25.
        let mut tape = Tape::new();
        let s1 = sim_from(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s2 = sim_from(&mut tape, &[vec![1.0, 0.0], vec![1.0, 3.0f64.sqrt()]]);
        let c = consistency_loss(&mut tape, &s1, &s2).unwrap();
        assert!((c.item().unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn consistency_rejects_size_mismatch() {
        let mut tape = Tape::new();
        let a = sim_from(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = sim_from(&mut tape, &[vec![1.0, 0.0]]);
        assert!(consistency_loss(&mut tape, &a, &b).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn consistency_is_a_pseudometric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..3)
                    .map(|_| loop {
                        let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                        if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3 {
                            break v;
                        }
                    })
                    .collect()
            };
            let (va, vb, vc) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let mut tape = Tape::new();
            let a = sim_from(&mut tape, &va);
            let b = sim_from(&mut tape, &vb);
            let c = sim_from(&mut tape, &vc);
            let ab = consistency_loss(&mut tape, &a, &b).unwrap().item().unwrap();
            let ba = consistency_loss(&mut tape, &b, &a).unwrap().item().unwrap();
            let ac = consistency_loss(&mut tape, &a, &c).unwrap().item().unwrap();
            let cb = consistency_loss(&mut tape, &c, &b).unwrap().item().unwrap();
            let aa = consistency_loss(&mut tape, &a, &a).unwrap().item().unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!(aa.abs() < 1e-15);
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn diversity_invariant_under_positive_rescaling(
            seed in 0u64..10_000,
            scales in proptest::collection::vec(0.1f64..10.0, 4),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let protos: Vec<Vec<f64>> = (0..4)
                .map(|_| loop {
                    let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    if v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-3 {
                        break v;
                    }
                })
                .collect();
            let base = run_diversity(&protos);
            let rescaled: Vec<Vec<f64>> = protos
                .iter()
                .zip(&scales)
                .map(|(p, s)| p.iter().map(|x| x * s).collect())
                .collect();
            let scaled = run_diversity(&rescaled);
            prop_assert!((base - scaled).abs() < 1e-12);
        }
    }

    // ── total ────────────────────────────────────────────────────────

    #[test]
    fn total_combines_terms_with_weights() {
        let mut tape = Tape::new();
        let ms = vec![
            tape.constant_scalar(1.0).unwrap(),
            tape.constant_scalar(2.0).unwrap(),
        ];
        let div = vec![
            tape.constant_scalar(0.1).unwrap(),
            tape.constant_scalar(0.2).unwrap(),
        ];
        let con = tape.constant_scalar(0.5).unwrap();
        let w = LossWeights {
            lambda1: vec![1.0, 0.1],
            lambda2: 0.9,
            ..LossWeights::default()
        };
        let total = total_loss(&mut tape, &ms, &div, Some(&con), &w).unwrap();
        // 0.3 + (1.0·1 + 0.1·2) + 0.9·0.5 = 0.3 + 1.2 + 0.45 = 1.95
        assert!((total.item().unwrap() - 1.95).abs() < 1e-12);
    }

    #[test]
    fn total_all_zero_terms() {
        let mut tape = Tape::new();
        let ms = vec![tape.constant_scalar(0.0).unwrap()];
        let div = vec![tape.constant_scalar(0.0).unwrap()];
        let w = LossWeights {
            lambda1: vec![1.0],
            ..LossWeights::default()
        };
        let total = total_loss(&mut tape, &ms, &div, None, &w).unwrap();
        assert_eq!(total.item().unwrap(), 0.0);
    }

    #[test]
    fn total_zero_weights_leave_only_diversity() {
        let mut tape = Tape::new();
        let ms = vec![
            tape.constant_scalar(3.0).unwrap(),
            tape.constant_scalar(4.0).unwrap(),
        ];
        let div = vec![
            tape.constant_scalar(0.25).unwrap(),
            tape.constant_scalar(0.5).unwrap(),
        ];
        let con = tape.constant_scalar(9.0).unwrap();
        let w = LossWeights {
            lambda1: vec![0.0, 0.0],
            lambda2: 0.0,
            ..LossWeights::default()
        };
        let total = total_loss(&mut tape, &ms, &div, Some(&con), &w).unwrap();
        assert!((total.item().unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn total_rejects_length_mismatch() {
        let mut tape = Tape::new();
        let ms = vec![tape.constant_scalar(1.0).unwrap()];
        let div = vec![
            tape.constant_scalar(0.1).unwrap(),
            tape.constant_scalar(0.2).unwrap(),
        ];
        assert!(total_loss(&mut tape, &ms, &div, None, &LossWeights::default()).is_err());
    }

    #[test]
    fn all_loss_gradients_match_finite_differences() {
        // diversity + consistency gradients (ms covered separately above).
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let k = 3;
        let l = 3;
        let protos: Vec<f64> = (0..k * l)
            .map(|_| rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();

        let eval = |p: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let t = tape.leaf(Tensor::matrix(k, l, p.to_vec()).unwrap(), true);
            diversity_loss(&mut tape, &t).unwrap().item().unwrap()
        };
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::matrix(k, l, protos.clone()).unwrap(), true);
        let loss = diversity_loss(&mut tape, &t).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let ad = grads.get(&t).unwrap().to_vec();
        let step = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        for i in 0..protos.len() {
            let mut plus = protos.clone();
            plus[i] += step;
            let mut minus = protos.clone();
            minus[i] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            assert!(rel(ad[i], fd) < 1e-4, "div grad {i}: {} vs {fd}", ad[i]);
        }

        // consistency through two similarity matrices.
        let flat: Vec<f64> = (0..4 * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let flat2: Vec<f64> = (0..4 * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let eval_con = |f1: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let e1: Vec<Tensor> = f1
                .chunks(2)
                .map(|c| tape.leaf(Tensor::vector(c.to_vec()).unwrap(), true))
                .collect();
            let e2: Vec<Tensor> = flat2
                .chunks(2)
                .map(|c| tape.leaf(Tensor::vector(c.to_vec()).unwrap(), false))
                .collect();
            let s1 = similarity_matrix(&mut tape, &e1).unwrap();
            let s2 = similarity_matrix(&mut tape, &e2).unwrap();
            consistency_loss(&mut tape, &s1, &s2).unwrap().item().unwrap()
        };
        let mut tape = Tape::new();
        let e1: Vec<Tensor> = flat
            .chunks(2)
            .map(|c| tape.leaf(Tensor::vector(c.to_vec()).unwrap(), true))
            .collect();
        let e2: Vec<Tensor> = flat2
            .chunks(2)
            .map(|c| tape.leaf(Tensor::vector(c.to_vec()).unwrap(), false))
            .collect();
        let s1 = similarity_matrix(&mut tape, &e1).unwrap();
        let s2 = similarity_matrix(&mut tape, &e2).unwrap();
        let loss = consistency_loss(&mut tape, &s1, &s2).unwrap();
        let grads = tape.backward(&loss).unwrap();
        for (s, e) in e1.iter().enumerate() {
            let ad = grads.get(e).unwrap();
            for i in 0..2 {
                let idx = s * 2 + i;
                let mut plus = flat.clone();
                plus[idx] += step;
                let mut minus = flat.clone();
                minus[idx] -= step;
                let fd = (eval_con(&plus) - eval_con(&minus)) / (2.0 * step);
                assert!(rel(ad[i], fd) < 1e-4, "con grad[{s}][{i}]: {} vs {fd}", ad[i]);
            }
        }
    }
}
