//! LoRA adapters and the base / low-rank split of an adapted projection.
//!
//! For agent `i` the adapted projection is `x (W0 + s A_i B_i)` with
//! `s = alpha / rank`. The split keeps three pieces apart:
//!
//! * `y_base = x W0`, the part every agent shares,
//! * `y_lr = x A_i`, the rank-`r` intermediate (unscaled),
//! * `y_full = y_base + s (y_lr B_i)`.
//!
//! The scale lives with the up-projection so a low-rank cache built from a
//! shared `A` stays agent-agnostic.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    a: Matrix<T>,
    b: Matrix<T>,
    alpha: T,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `a` is `d_in x r` (down-projection), `b` is `r x d_out` (up-projection).
    pub fn new(a: Matrix<T>, b: Matrix<T>, alpha: T) -> Result<Self> {
        let rank = a.cols();
        if b.rows() != rank {
            return Err(Error::RankMismatch {
                expected: rank,
                got: b.rows(),
            });
        }
        if rank > a.rows().min(b.cols()) {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} exceeds min(d_in, d_out) = {}",
                a.rows().min(b.cols())
            )));
        }
        if rank > 0 && !(alpha.is_finite() && alpha > T::zero()) {
            return Err(Error::InvalidConfig(format!(
                "LoRA alpha must be finite and positive, got {alpha}"
            )));
        }
        Ok(Self { a, b, alpha })
    }

    /// An adapter with all-zero factors.
    pub fn zeros(d_in: usize, d_out: usize, rank: usize, alpha: T) -> Result<Self> {
        Self::new(Matrix::zeros(d_in, rank), Matrix::zeros(rank, d_out), alpha)
    }

    #[inline]
    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    #[inline]
    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    #[inline]
    pub fn alpha(&self) -> T {
        self.alpha
    }

    #[inline]
    pub fn d_in(&self) -> usize {
        self.a.rows()
    }

    #[inline]
    pub fn d_out(&self) -> usize {
        self.b.cols()
    }

    /// `alpha / rank`; a rank-0 adapter contributes nothing and has scale 0.
    #[inline]
    pub fn scale(&self) -> T {
        if self.rank() == 0 {
            T::zero()
        } else {
            self.alpha / T::of_usize(self.rank())
        }
    }

    pub fn with_alpha(&self, alpha: T) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), alpha)
    }
}

/// Output of [`MultiLoraSet::forward_decomposed`].
#[derive(Debug, Clone)]
pub struct Decomposed<T> {
    pub base: Matrix<T>,
    pub lr: Matrix<T>,
    pub full: Matrix<T>,
}

/// One frozen base weight plus one adapter per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLoraSet<T> {
    base_weight: Matrix<T>,
    adapters: Vec<LoraAdapter<T>>,
    shared_a: bool,
}

impl<T: Scalar> MultiLoraSet<T> {
    pub fn new(
        base_weight: Matrix<T>,
        adapters: Vec<LoraAdapter<T>>,
        shared_a: bool,
    ) -> Result<Self> {
        let (d_in, d_out) = base_weight.shape();
        let rank = adapters.first().map_or(0, LoraAdapter::rank);
        for (i, ad) in adapters.iter().enumerate() {
            if ad.d_in() != d_in || ad.d_out() != d_out {
                return Err(Error::ShapeMismatch {
                    op: "MultiLoraSet::new",
                    left: (d_in, d_out),
                    right: (ad.d_in(), ad.d_out()),
                });
            }
            if ad.rank() != rank {
                return Err(Error::RankMismatch {
                    expected: rank,
                    got: ad.rank(),
                });
            }
            if shared_a && ad.a() != adapters[0].a() {
                return Err(Error::InvalidConfig(format!(
                    "shared-A set: adapter {i} has a different down-projection"
                )));
            }
        }
        Ok(Self {
            base_weight,
            adapters,
            shared_a,
        })
    }

    #[inline]
    pub fn base_weight(&self) -> &Matrix<T> {
        &self.base_weight
    }

    #[inline]
    pub fn adapters(&self) -> &[LoraAdapter<T>] {
        &self.adapters
    }

    pub fn adapter(&self, agent: usize) -> Result<&LoraAdapter<T>> {
        self.adapters.get(agent).ok_or(Error::AgentOutOfRange {
            agent,
            n_agents: self.adapters.len(),
        })
    }

    #[inline]
    pub fn shared_a(&self) -> bool {
        self.shared_a
    }

    #[inline]
    pub fn n_agents(&self) -> usize {
        self.adapters.len()
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.adapters.first().map_or(0, LoraAdapter::rank)
    }

    pub fn forward_decomposed(&self, agent: usize, x: &Matrix<T>) -> Result<Decomposed<T>> {
        let adapter = self.adapter(agent)?;
        let base = x.matmul(&self.base_weight)?;
        let lr = x.matmul(adapter.a())?;
        let full = base.add(&expand_lr(&lr, adapter)?)?;
        Ok(Decomposed { base, lr, full })
    }
}

/// `s * (y_lr * B)`: the adapter's contribution rebuilt from its low-rank
/// intermediate.
pub fn expand_lr<T: Scalar>(y_lr: &Matrix<T>, adapter: &LoraAdapter<T>) -> Result<Matrix<T>> {
    if y_lr.cols() != adapter.rank() {
        return Err(Error::RankMismatch {
            expected: adapter.rank(),
            got: y_lr.cols(),
        });
    }
    let scaled = y_lr.scale(adapter.scale());
    scaled.matmul(adapter.b())
}
