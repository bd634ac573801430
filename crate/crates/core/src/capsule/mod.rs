//! Dynamic routing by agreement from per-token states to a fixed set of
//! parent capsules, plus the pooling aggregator it is compared against.

mod ops;
mod pooling;
mod route;

pub use ops::{aggregate_parents, squash, transform_child, update_coupling, update_logits};
pub use pooling::{pooling_baseline, pooling_batch, POOLED_ROWS};
pub use route::{dynamic_route, route_batch, RoutingTrace};

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamId, ParamSet};
use crate::tensor::{Real, Var};

/// How routing logits are scored against parents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    /// Agreement is the dot product of parent and vote.
    Dot,
    /// Agreement is `g(parent)·g(child)` with a small learned network `g`.
    Separable,
}

/// Whether every iteration uses the same transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sharing {
    Shared,
    PerIteration,
}

/// Axis the coupling softmax normalises over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingAxis {
    /// Each child distributes all of its mass over the parents.
    Parents,
    /// Each parent distributes its attention over the children.
    Children,
}

macro_rules! keyword_enum {
    ($ty:ty { $($name:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}, expected one of {}"),
                        s,
                        [$($name),+].join("|")
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match self { $(x if *x == $v => $name,)+ _ => unreachable!() };
                f.write_str(name)
            }
        }
    };
}

keyword_enum!(Scoring { "dot" => Scoring::Dot, "separable" => Scoring::Separable });
keyword_enum!(Sharing { "shared" => Sharing::Shared, "per_iteration" => Sharing::PerIteration });
keyword_enum!(CouplingAxis { "parents" => CouplingAxis::Parents, "children" => CouplingAxis::Children });

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleConfig {
    /// Number of parent capsules `M`.
    pub capsules: usize,
    /// Routing iterations `T`.
    pub iterations: usize,
    pub scoring: Scoring,
    pub sharing: Sharing,
    pub positional: bool,
    pub coupling_axis: CouplingAxis,
    /// Capsule width `d_c`.
    pub dim: usize,
}

impl Default for CapsuleConfig {
    fn default() -> Self {
        Self {
            capsules: 6,
            iterations: 3,
            scoring: Scoring::Separable,
            sharing: Sharing::PerIteration,
            positional: true,
            coupling_axis: CouplingAxis::Parents,
            dim: 512,
        }
    }
}

impl CapsuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capsules == 0 {
            return Err(Error::Config("capsule count must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("routing iterations must be at least 1".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("capsule width {} is below 2", self.dim)));
        }
        if self.positional && !self.dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "capsule width {} must be even with positional routing",
                self.dim
            )));
        }
        Ok(())
    }

    /// Number of distinct transform sets.
    pub fn transform_sets(&self) -> usize {
        match self.sharing {
            Sharing::Shared => 1,
            Sharing::PerIteration => self.iterations,
        }
    }
}

/// The two-layer scorer `g(x) = relu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone)]
pub struct ScorerParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ScorerParams {
    pub fn apply<'g, F: Real>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let shape = x.shape();
        let d = *shape.last().ok_or(Error::Axis { axis: 0, rank: 0 })?;
        let rows = x.reshape(vec![shape.iter().product::<usize>() / d, d])?;
        let hidden = rows.matmul(p.get(self.w1))?.add(p.get(self.b1))?.relu();
        let out = hidden.matmul(p.get(self.w2))?.add(p.get(self.b2))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out.shape()[1];
        out.reshape(out_shape)
    }
}

/// Learned state of a routing layer.
///
/// Each transform is a `[d_c × M·d_c]` matrix whose column block `j` is the
/// per-parent map `W_j`, so all votes come from one product.
#[derive(Debug, Clone)]
pub struct RoutingParams {
    pub transforms: Vec<ParamId>,
    pub scorer: Option<ScorerParams>,
    pub config: CapsuleConfig,
}

impl RoutingParams {
    pub fn init<F: Real>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        config: &CapsuleConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, m) = (config.dim, config.capsules);
        let bound = (1.0 / d as f64).sqrt();
        let mut init = Init { rng };
        let mut transforms = Vec::new();
        for t in 0..config.transform_sets() {
            let w = init.uniform(vec![d, m * d], bound);
            transforms.push(ps.insert(format!("{prefix}.transform{t}"), w)?);
        }
        let scorer = match config.scoring {
            Scoring::Dot => None,
            Scoring::Separable => {
                let w1 = init.xavier(d, d);
                let w2 = init.xavier(d, d);
                Some(ScorerParams {
                    w1: ps.insert(format!("{prefix}.scorer.w1"), w1)?,
                    b1: ps.insert(format!("{prefix}.scorer.b1"), crate::Tensor::zeros(vec![d]))?,
                    w2: ps.insert(format!("{prefix}.scorer.w2"), w2)?,
                    b2: ps.insert(format!("{prefix}.scorer.b2"), crate::Tensor::zeros(vec![d]))?,
                })
            }
        };
        Ok(Self {
            transforms,
            scorer,
            config: config.clone(),
        })
    }

    /// Transform used at iteration `t` (0-based).
    pub fn transform(&self, t: usize) -> ParamId {
        match self.config.sharing {
            Sharing::Shared => self.transforms[0],
            Sharing::PerIteration => self.transforms[t],
        }
    }
}
