//! Model parameters for one or two CRT embedding branches.
//!
//! All trainable values live in a flat arena of named [`ParamGroup`]s;
//! branches reference groups by index. Cross-branch weight sharing is the
//! same group index appearing in two branch layouts, so shared parameters
//! are registered on a tape exactly once and gradients from both uses
//! accumulate into one slot. Prototypes are never shared.

use rand::Rng;

use crate::crt::{BranchConfig, BranchVars, EmbeddingHead, HeadVars, PrototypeSet};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor};

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamGroup {
    fn new(name: String, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        ParamGroup { name, shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Group indices of one head's four tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLayout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Group indices of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLayout {
    pub config: BranchConfig,
    pub prototypes: usize,
    pub heads: Vec<HeadLayout>,
}

/// The full trainable state: parameter arena plus branch layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub feature_dim: usize,
    pub share_backbone_weights: bool,
    pub groups: Vec<ParamGroup>,
    pub branches: Vec<BranchLayout>,
}

impl ModelState {
    /// Build a model with freshly initialized parameters. Branch order is
    /// init order, so branch 1's draws do not depend on later branches.
    pub fn new<R: Rng>(
        branch_configs: &[BranchConfig],
        feature_dim: usize,
        share_backbone_weights: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if branch_configs.is_empty() {
            return Err(Error::InvalidParameter("at least one branch required".into()));
        }
        if feature_dim == 0 {
            return Err(Error::InvalidParameter("feature dim must be positive".into()));
        }
        for cfg in branch_configs {
            cfg.validate()?;
        }

        let mut model = ModelState {
            feature_dim,
            share_backbone_weights,
            groups: Vec::new(),
            branches: Vec::new(),
        };

        for (b, cfg) in branch_configs.iter().enumerate() {
            let prototypes = PrototypeSet::random(cfg.prototype_count, feature_dim, rng)?;
            let proto_idx = model.push_group(
                format!("branch{}.prototypes", b + 1),
                vec![cfg.prototype_count, feature_dim],
                prototypes.data().to_vec(),
            );

            let mut heads = Vec::with_capacity(cfg.head_count());
            for h in 0..cfg.head_count() {
                let shared = if share_backbone_weights && b > 0 {
                    model.branches[0].heads.get(h).copied()
                } else {
                    None
                };
                let head = EmbeddingHead::random(feature_dim, cfg.hidden_dim, cfg.out_dim, rng);
                let prefix = format!("branch{}.head{}", b + 1, h);

                // Hidden layer shares with branch 1 when extents match.
                let (w1, b1) = match shared {
                    Some(first)
                        if model.groups[first.w1].shape == [cfg.hidden_dim, feature_dim] =>
                    {
                        (first.w1, first.b1)
                    }
                    _ => (
                        model.push_group(
                            format!("{prefix}.w1"),
                            vec![cfg.hidden_dim, feature_dim],
                            head.w1.clone(),
                        ),
                        model.push_group(format!("{prefix}.b1"), vec![cfg.hidden_dim], head.b1.clone()),
                    ),
                };
                // Output layer shares only when its extents also match.
                let (w2, b2) = match shared {
                    Some(first)
                        if model.groups[first.w2].shape == [cfg.out_dim, cfg.hidden_dim] =>
                    {
                        (first.w2, first.b2)
                    }
                    _ => (
                        model.push_group(
                            format!("{prefix}.w2"),
                            vec![cfg.out_dim, cfg.hidden_dim],
                            head.w2.clone(),
                        ),
                        model.push_group(format!("{prefix}.b2"), vec![cfg.out_dim], head.b2.clone()),
                    ),
                };
                heads.push(HeadLayout { w1, b1, w2, b2 });
            }

            model.branches.push(BranchLayout {
                config: cfg.clone(),
                prototypes: proto_idx,
                heads,
            });
        }
        Ok(model)
    }

    fn push_group(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> usize {
        self.groups.push(ParamGroup::new(name, shape, data));
        self.groups.len() - 1
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }

    /// Prototype set of one branch, copied out of the arena.
    pub fn prototype_set(&self, branch: usize) -> Result<PrototypeSet> {
        let layout = self.branches.get(branch).ok_or(Error::InvalidParameter(format!(
            "branch index {branch} out of range"
        )))?;
        let g = &self.groups[layout.prototypes];
        PrototypeSet::new(g.shape[0], g.shape[1], g.data.clone())
    }

    /// Register every group as a tape leaf exactly once and assemble
    /// branch-level views. Returned tensors in `leaves` parallel `groups`.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> (Vec<Tensor>, Vec<BranchVars>) {
        let leaves: Vec<Tensor> = self
            .groups
            .iter()
            .map(|g| {
                tape.leaf(
                    Tensor::new(g.shape.clone(), g.data.clone())
                        .expect("group extents are consistent by construction"),
                    requires_grad,
                )
            })
            .collect();
        let branches = self
            .branches
            .iter()
            .map(|layout| BranchVars {
                config: layout.config.clone(),
                prototypes: leaves[layout.prototypes].clone(),
                heads: layout
                    .heads
                    .iter()
                    .map(|h| HeadVars {
                        w1: leaves[h.w1].clone(),
                        b1: leaves[h.b1].clone(),
                        w2: leaves[h.w2].clone(),
                        b2: leaves[h.b2].clone(),
                    })
                    .collect(),
            })
            .collect();
        (leaves, branches)
    }

    /// Per-group gradients in arena order, zero-filled where no gradient
    /// flowed.
    pub fn collect_gradients(&self, leaves: &[Tensor], grads: &Gradients) -> Vec<Vec<f64>> {
        leaves.iter().map(|l| grads.get_or_zero(l)).collect()
    }
}
