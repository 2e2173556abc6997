//! End-to-end training of one or two CRT branches: P×Q batch loop,
//! optimizer, loss history, evaluation on held-out classes, a finite
//! difference gradient-check harness, and versioned binary checkpoints.
//!
//! Every source of randomness derives from the run seed: dataset generation
//! uses stream 0, parameter initialization stream 1, batch sampling
//! stream 2. All batch randomness for a step is drawn before any forward
//! pass, so branch-1 training is unaffected by branch-2 configuration when
//! the branches share no parameters and the consistency weight is zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crt::{forward_branch, BranchVars};
use crate::data::{sample_batch, Batch, Sample};
use crate::error::{Error, Result};
use crate::loss::{
    consistency_loss, diversity_loss, ms_loss, similarity_matrix, total_loss, LossWeights,
};
use crate::metrics::{
    embedding_space_density, recall_at_k, spectral_decay, DensityReport, RetrievalReport,
    SpectralReport,
};
use crate::model::ModelState;
use crate::tensor::{Tape, Tensor};

/// RNG stream for parameter initialization.
pub const INIT_STREAM: u64 = 1;
/// RNG stream for batch sampling.
pub const BATCH_STREAM: u64 = 2;

/// RNG used to initialize model parameters for a run seed.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

/// RNG used for batch composition during training.
pub fn batch_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BATCH_STREAM);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Plain SGD or Adam over the model's parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, group_sizes: &[usize]) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            first_moment: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over all groups.
    pub fn apply(&mut self, groups: &mut [crate::model::ParamGroup], grads: &[Vec<f64>]) {
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (group, g) in groups.iter_mut().zip(grads) {
                    for (w, gi) in group.data.iter_mut().zip(g) {
                        *w -= self.learning_rate * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.step_count as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.step_count as i32);
                for (idx, (group, g)) in groups.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[idx];
                    let v = &mut self.second_moment[idx];
                    for i in 0..group.data.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        group.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Training-run hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Classes per batch.
    pub p: usize,
    /// Samples per class.
    pub q: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            steps_per_epoch: 25,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            p: 4,
            q: 4,
            weights: LossWeights::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidParameter("learning rate must be >= 0".into()));
        }
        if self.p == 0 || self.q == 0 {
            return Err(Error::InvalidParameter("batch shape must be positive".into()));
        }
        self.weights.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Loss values of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub diversity: f64,
    pub ms1: f64,
    pub ms2: f64,
    pub consistency: f64,
}

/// Render a loss history as the CSV written next to checkpoints.
pub fn history_to_csv(history: &[StepLoss]) -> String {
    let mut out = String::from("step,loss,L_div,L_ms1,L_ms2,L_con\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.step, h.total, h.diversity, h.ms1, h.ms2, h.consistency
        ));
    }
    out
}

struct StepObjective {
    total: Tensor,
    diversity: f64,
    ms: Vec<f64>,
    consistency: f64,
}

/// Forward both branches over a batch and assemble the combined objective
/// on the tape. MS and consistency values are always computed for the
/// history; zero-weight terms stay off the loss graph.
fn batch_objective(
    tape: &mut Tape,
    branches: &[BranchVars],
    batch: &Batch,
    weights: &LossWeights,
) -> Result<StepObjective> {
    let labels = batch.labels();
    let feature_leaves: Vec<Tensor> = batch
        .samples
        .iter()
        .map(|s| tape.leaf(s.feature_map.to_tensor(), false))
        .collect();

    let mut sims = Vec::with_capacity(branches.len());
    let mut ms_terms = Vec::with_capacity(branches.len());
    let mut div_terms = Vec::with_capacity(branches.len());
    for branch in branches {
        let embeddings: Vec<Tensor> = feature_leaves
            .iter()
            .map(|f| forward_branch(tape, f, branch))
            .collect::<Result<_>>()?;
        let sim = similarity_matrix(tape, &embeddings)?;
        ms_terms.push(ms_loss(tape, &sim, &labels, weights)?);
        div_terms.push(diversity_loss(tape, &branch.prototypes)?);
        sims.push(sim);
    }
    let con = if branches.len() >= 2 {
        Some(consistency_loss(tape, &sims[0], &sims[1])?)
    } else {
        None
    };

    let total = total_loss(tape, &ms_terms, &div_terms, con.as_ref(), weights)?;
    Ok(StepObjective {
        total,
        diversity: div_terms
            .iter()
            .map(|t| t.item().expect("diversity is scalar"))
            .sum(),
        ms: ms_terms
            .iter()
            .map(|t| t.item().expect("ms loss is scalar"))
            .collect(),
        consistency: con.map(|t| t.item().expect("consistency is scalar")).unwrap_or(0.0),
    })
}

/// Scalar value of the combined objective on a fixed batch; used by the
/// finite-difference harness.
pub fn batch_loss_value(model: &ModelState, batch: &Batch, weights: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, branches) = model.register(&mut tape, false);
    let objective = batch_objective(&mut tape, &branches, batch, weights)?;
    objective.total.item()
}

/// Run `n_steps` training steps, continuing the given optimizer and batch
/// rng state. Returns one loss record per step, numbered from `start_step`.
pub fn train_steps(
    model: &mut ModelState,
    data: &[Sample],
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
    rng: &mut ChaCha8Rng,
    start_step: usize,
    n_steps: usize,
) -> Result<Vec<StepLoss>> {
    cfg.validate()?;
    let mut history = Vec::with_capacity(n_steps);
    for step in start_step..start_step + n_steps {
        // All batch randomness is drawn before any forward pass.
        let batch = sample_batch(data, cfg.p, cfg.q, rng)?;

        let mut tape = Tape::new();
        let (leaves, branches) = model.register(&mut tape, true);
        let objective = batch_objective(&mut tape, &branches, &batch, &cfg.weights)?;
        let total_value = objective.total.item()?;
        if !total_value.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let grads = tape.backward(&objective.total)?;
        let per_group = model.collect_gradients(&leaves, &grads);
        optimizer.apply(&mut model.groups, &per_group);

        history.push(StepLoss {
            step,
            total: total_value,
            diversity: objective.diversity,
            ms1: objective.ms.first().copied().unwrap_or(0.0),
            ms2: objective.ms.get(1).copied().unwrap_or(0.0),
            consistency: objective.consistency,
        });
    }
    Ok(history)
}

/// Full training run from a fresh optimizer and the seed's batch stream.
pub fn train(model: &mut ModelState, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<StepLoss>> {
    let sizes: Vec<usize> = model.groups.iter().map(|g| g.len()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);
    let mut rng = batch_rng(cfg.seed);
    train_steps(model, data, cfg, &mut optimizer, &mut rng, 0, cfg.total_steps())
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Retrieval and generalization reports of one branch.
#[derive(Debug, Clone)]
pub struct BranchEval {
    pub retrieval: RetrievalReport,
    pub density: DensityReport,
    pub spectral: SpectralReport,
}

impl BranchEval {
    pub fn to_kv(&self) -> String {
        format!(
            "{}{}{}",
            self.retrieval.to_kv(),
            self.density.to_kv(),
            self.spectral.to_kv()
        )
    }
}

/// Embed samples with a frozen model through one branch; raw (unnormalized)
/// embeddings in sample order.
pub fn embed_samples(model: &ModelState, samples: &[Sample], branch: usize) -> Result<Vec<Vec<f64>>> {
    if branch >= model.branch_count() {
        return Err(Error::InvalidParameter(format!(
            "branch index {branch} out of range"
        )));
    }
    samples
        .iter()
        .map(|s| {
            let mut tape = Tape::new();
            let (_, branches) = model.register(&mut tape, false);
            let features = tape.leaf(s.feature_map.to_tensor(), false);
            let out = forward_branch(&mut tape, &features, &branches[branch])?;
            Ok(out.data().to_vec())
        })
        .collect()
}

/// L2-normalize embeddings in place; vectors with vanishing norm are left
/// unchanged so degenerate models still evaluate.
pub fn normalize_embeddings(embeddings: &mut [Vec<f64>]) {
    for e in embeddings.iter_mut() {
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in e.iter_mut() {
                *v /= norm;
            }
        }
    }
}

/// Evaluate every branch on held-out samples: embeddings are L2-normalized,
/// then scored for Recall@K, embedding-space density and spectral decay.
/// Branch 0 is the primary report. `train_class_ids` (when non-empty) is
/// asserted disjoint from the test labels.
pub fn evaluate(
    model: &ModelState,
    test: &[Sample],
    train_class_ids: &[usize],
    ks: &[usize],
) -> Result<Vec<BranchEval>> {
    let overlap: Vec<usize> = test
        .iter()
        .map(|s| s.label)
        .filter(|l| train_class_ids.contains(l))
        .collect();
    if !overlap.is_empty() {
        let mut overlap = overlap;
        overlap.sort_unstable();
        overlap.dedup();
        return Err(Error::ClassOverlap { overlap });
    }
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();

    (0..model.branch_count())
        .map(|b| {
            let mut embeddings = embed_samples(model, test, b)?;
            normalize_embeddings(&mut embeddings);
            Ok(BranchEval {
                retrieval: recall_at_k(&embeddings, &labels, ks)?,
                density: embedding_space_density(&embeddings, &labels)?,
                spectral: spectral_decay(&embeddings)?,
            })
        })
        .collect()
}

// ── Gradient check ───────────────────────────────────────────────────

const GRAD_CHECK_STEP: f64 = 1e-5;

/// Worst relative error of one parameter group.
#[derive(Debug, Clone)]
pub struct GroupGradError {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupGradError>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            out.push_str(&format!("group.{}.max_rel_err={}\n", g.name, g.max_rel_err));
        }
        out.push_str(&format!(
            "max_rel_err={}\ntolerance={}\npass={}\n",
            self.max_rel_err,
            self.tolerance,
            self.pass()
        ));
        out
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compare autodiff gradients of the combined objective against central
/// finite differences, per parameter group.
///
/// Full finite differences need a small model (a few thousand parameters);
/// for larger models `max_probes_per_group` caps the work by probing evenly
/// spaced coordinates of each group. Every group is always touched.
pub fn grad_check(
    model: &mut ModelState,
    batch: &Batch,
    weights: &LossWeights,
    tolerance: f64,
    max_probes_per_group: usize,
) -> Result<GradCheckReport> {
    if max_probes_per_group == 0 {
        return Err(Error::InvalidParameter("probe budget must be >= 1".into()));
    }

    // Autodiff gradients once.
    let mut tape = Tape::new();
    let (leaves, branches) = model.register(&mut tape, true);
    let objective = batch_objective(&mut tape, &branches, batch, weights)?;
    let grads = tape.backward(&objective.total)?;
    let ad = model.collect_gradients(&leaves, &grads);

    let mut report = GradCheckReport {
        groups: Vec::with_capacity(model.groups.len()),
        max_rel_err: 0.0,
        tolerance,
    };
    for gi in 0..model.groups.len() {
        let len = model.groups[gi].len();
        let probes: Vec<usize> = if len <= max_probes_per_group {
            (0..len).collect()
        } else {
            (0..max_probes_per_group)
                .map(|i| i * len / max_probes_per_group)
                .collect()
        };
        let mut worst = 0.0f64;
        for &i in &probes {
            let old = model.groups[gi].data[i];
            model.groups[gi].data[i] = old + GRAD_CHECK_STEP;
            let plus = batch_loss_value(model, batch, weights)?;
            model.groups[gi].data[i] = old - GRAD_CHECK_STEP;
            let minus = batch_loss_value(model, batch, weights)?;
            model.groups[gi].data[i] = old;
            let fd = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            worst = worst.max(relative_error(ad[gi][i], fd));
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.groups.push(GroupGradError {
            name: model.groups[gi].name.clone(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}

// ── Checkpoints ──────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 8] = b"CRTCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

struct Payload {
    buf: Vec<u8>,
}

impl Payload {
    fn new() -> Self {
        Payload { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.u32(vs.len() as u32);
        for &v in vs {
            self.f64(v);
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptFile {
                path: self.path.to_path_buf(),
                reason: "truncated payload".into(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptFile {
            path: self.path.to_path_buf(),
            reason: "invalid group name".into(),
        })
    }
}

/// Serializable snapshot of a training run: model, optimizer, step counter
/// and batch-rng state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: Optimizer,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Write a checkpoint: magic, version, FNV-1a checksum, payload;
/// little-endian throughout.
pub fn save_checkpoint(
    path: &Path,
    model: &ModelState,
    optimizer: &Optimizer,
    step: u64,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let mut p = Payload::new();
    p.u32(model.feature_dim as u32);
    p.u8(model.share_backbone_weights as u8);
    p.u32(model.branches.len() as u32);
    for branch in &model.branches {
        p.u32(branch.config.prototype_count as u32);
        p.u32(branch.config.hidden_dim as u32);
        p.u32(branch.config.out_dim as u32);
        p.u8(branch.config.per_prototype_heads as u8);
        p.f64(branch.config.ms_weight);
        p.u32(branch.prototypes as u32);
        p.u32(branch.heads.len() as u32);
        for h in &branch.heads {
            p.u32(h.w1 as u32);
            p.u32(h.b1 as u32);
            p.u32(h.w2 as u32);
            p.u32(h.b2 as u32);
        }
    }
    p.u32(model.groups.len() as u32);
    for g in &model.groups {
        p.str(&g.name);
        p.u32(g.shape.len() as u32);
        for &d in &g.shape {
            p.u32(d as u32);
        }
        p.f64s(&g.data);
    }
    p.u8(match optimizer.kind {
        OptimizerKind::Sgd => 0,
        OptimizerKind::Adam => 1,
    });
    p.f64(optimizer.learning_rate);
    p.u64(optimizer.step_count);
    p.u32(optimizer.first_moment.len() as u32);
    for (m, v) in optimizer.first_moment.iter().zip(&optimizer.second_moment) {
        p.f64s(m);
        p.f64s(v);
    }
    p.u64(step);
    p.buf.extend_from_slice(&rng.get_seed());
    p.u64(rng.get_stream());
    p.u128(rng.get_word_pos());

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&fnv1a(&p.buf).to_le_bytes())?;
    out.write_all(&p.buf)?;
    out.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`], verifying the checksum.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let file = File::open(path).map_err(|e| corrupt(&format!("cannot open: {e}")))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let checksum = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let payload = &bytes[20..];
    if fnv1a(payload) != checksum {
        return Err(corrupt("checksum mismatch"));
    }

    let mut r = Reader {
        buf: payload,
        pos: 0,
        path,
    };
    let feature_dim = r.u32()? as usize;
    let share = r.u8()? != 0;
    let n_branches = r.u32()? as usize;
    let mut branches = Vec::with_capacity(n_branches);
    for _ in 0..n_branches {
        let config = crate::crt::BranchConfig {
            prototype_count: r.u32()? as usize,
            hidden_dim: r.u32()? as usize,
            out_dim: r.u32()? as usize,
            per_prototype_heads: r.u8()? != 0,
            ms_weight: r.f64()?,
        };
        let prototypes = r.u32()? as usize;
        let n_heads = r.u32()? as usize;
        let heads = (0..n_heads)
            .map(|_| {
                Ok(crate::model::HeadLayout {
                    w1: r.u32()? as usize,
                    b1: r.u32()? as usize,
                    w2: r.u32()? as usize,
                    b2: r.u32()? as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        branches.push(crate::model::BranchLayout {
            config,
            prototypes,
            heads,
        });
    }
    let n_groups = r.u32()? as usize;
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(r.u32()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = r.f64s()?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(corrupt("group shape and data disagree"));
        }
        groups.push(crate::model::ParamGroup { name, shape, data });
    }
    for branch in &branches {
        let valid = branch.prototypes < groups.len()
            && branch
                .heads
                .iter()
                .all(|h| h.w1 < groups.len() && h.b1 < groups.len() && h.w2 < groups.len() && h.b2 < groups.len());
        if !valid {
            return Err(corrupt("branch layout references missing groups"));
        }
    }
    let model = ModelState {
        feature_dim,
        share_backbone_weights: share,
        groups,
        branches,
    };

    let kind = match r.u8()? {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::Adam,
        _ => return Err(corrupt("unknown optimizer kind")),
    };
    let learning_rate = r.f64()?;
    let opt_steps = r.u64()?;
    let n_state = r.u32()? as usize;
    if n_state != model.groups.len() {
        return Err(corrupt("optimizer state count mismatch"));
    }
    let mut first = Vec::with_capacity(n_state);
    let mut second = Vec::with_capacity(n_state);
    for g in &model.groups {
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != g.len() || v.len() != g.len() {
            return Err(corrupt("optimizer state length mismatch"));
        }
        first.push(m);
        second.push(v);
    }
    let optimizer = Optimizer {
        kind,
        learning_rate,
        step_count: opt_steps,
        first_moment: first,
        second_moment: second,
    };

    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    if r.pos != r.buf.len() {
        return Err(corrupt("trailing bytes"));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        model,
        optimizer,
        step,
        rng,
    })
}
