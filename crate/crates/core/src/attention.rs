//! Causal attention over a shared base value cache plus a low-rank value
//! cache.
//!
//! The value seen by a query is `V_base + s * V_lr * B`. The blocked kernel
//! never forms `V_lr * B`; it runs the online softmax over key blocks,
//! accumulating `P * V_base` at full head width and `P * V_lr` at rank
//! width, and applies the up-projection once per query block after the key
//! loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, row_softmax, Matrix};
use crate::scalar::Scalar;

/// Inputs for one attention head.
///
/// `q` holds the `L_c` current rows, which sit at absolute positions
/// `query_offset..query_offset + L_c` of an `L`-row key/value sequence
/// (normally the last `L_c` rows; earlier windows see only keys up to their
/// own position).
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a, T> {
    pub q: &'a Matrix<T>,
    pub k: &'a Matrix<T>,
    pub v_base: &'a Matrix<T>,
    /// `L x r`; may have zero columns.
    pub v_lr: &'a Matrix<T>,
    /// `r x d_head`.
    pub b_up: &'a Matrix<T>,
    pub lora_scale: T,
    pub query_offset: usize,
}

impl<T: Scalar> AttentionInputs<'_, T> {
    pub fn validate(&self) -> Result<()> {
        let (l_c, d) = self.q.shape();
        let l = self.k.rows();
        let mismatch = |op, left, right| Err(Error::ShapeMismatch { op, left, right });
        if self.query_offset + l_c > l {
            return mismatch(
                "attention: offset + L_c > L",
                (self.query_offset, l_c),
                (l, d),
            );
        }
        if self.k.cols() != d {
            return mismatch("attention: k width", self.q.shape(), self.k.shape());
        }
        if self.v_base.shape() != (l, d) {
            return mismatch(
                "attention: v_base shape",
                self.k.shape(),
                self.v_base.shape(),
            );
        }
        let r = self.v_lr.cols();
        if self.v_lr.rows() != l {
            return mismatch("attention: v_lr rows", self.k.shape(), self.v_lr.shape());
        }
        if self.b_up.shape() != (r, d) {
            return mismatch("attention: b_up shape", (r, d), self.b_up.shape());
        }
        Ok(())
    }

    #[inline]
    fn seq_len(&self) -> usize {
        self.k.rows()
    }

    #[inline]
    fn head_dim(&self) -> usize {
        self.q.cols()
    }

    #[inline]
    fn rank(&self) -> usize {
        self.v_lr.cols()
    }

    #[inline]
    fn is_masked(&self, query_row: usize, key: usize) -> bool {
        key > self.query_offset + query_row
    }
}

/// Query (`b_r`) and key/value (`b_c`) block sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub b_r: usize,
    pub b_c: usize,
}

impl BlockConfig {
    pub fn new(b_r: usize, b_c: usize) -> Result<Self> {
        let cfg = Self { b_r, b_c };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_r == 0 || self.b_c == 0 {
            return Err(Error::InvalidConfig(format!(
                "block sizes must be positive (b_r={}, b_c={})",
                self.b_r, self.b_c
            )));
        }
        Ok(())
    }
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { b_r: 64, b_c: 64 }
    }
}

/// Multiply-accumulates performed by a kernel, split by role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelMacs {
    /// `Q K^T`.
    pub qk: u64,
    /// `P V_base`.
    pub pv: u64,
    /// Everything on the low-rank value path.
    pub lr: u64,
}

impl std::ops::AddAssign for KernelMacs {
    fn add_assign(&mut self, rhs: Self) {
        self.qk += rhs.qk;
        self.pv += rhs.pv;
        self.lr += rhs.lr;
    }
}

#[derive(Debug, Clone)]
pub struct KernelStats<T> {
    pub macs: KernelMacs,
    /// Final online-softmax denominator of every query row (relative to the
    /// row's final running max).
    pub row_denominators: Vec<T>,
}

/// Low-rank path MAC counts with and without reordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LrMacCounts {
    /// `L r d_head + L_c L d_head`: expand `V_lr B` first, then apply `P`.
    pub no_reorder: u64,
    /// `L_c L r + L_c r d_head`: accumulate `P V_lr`, then apply `B`.
    pub reorder: u64,
}

pub fn lr_mac_counts(seq_len: usize, l_c: usize, rank: usize, d_head: usize) -> LrMacCounts {
    let (l, l_c, r, d) = (seq_len as u64, l_c as u64, rank as u64, d_head as u64);
    LrMacCounts {
        no_reorder: l * r * d + l_c * l * d,
        reorder: l_c * l * r + l_c * r * d,
    }
}

/// Reference implementation: materializes the full value matrix and the full
/// score matrix.
pub fn naive_attention<T: Scalar>(inputs: &AttentionInputs<'_, T>) -> Result<Matrix<T>> {
    inputs.validate()?;
    let expansion = inputs.v_lr.scale(inputs.lora_scale).matmul(inputs.b_up)?;
    let values = inputs.v_base.add(&expansion)?;
    let inv_sqrt_d = T::one() / T::of_usize(inputs.head_dim()).sqrt();
    let mut scores = inputs.q.matmul(&inputs.k.transpose())?.scale(inv_sqrt_d);
    let (l_c, l) = scores.shape();
    for i in 0..l_c {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate().take(l) {
            if inputs.is_masked(i, j) {
                *s = T::neg_infinity();
            }
        }
    }
    row_softmax(&scores).matmul(&values)
}

pub fn flash_lora_attention<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    cfg: BlockConfig,
) -> Result<Matrix<T>> {
    flash_lora_attention_with_stats(inputs, cfg).map(|(o, _)| o)
}

/// Blocked kernel with the low-rank accumulator.
pub fn flash_lora_attention_with_stats<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    cfg: BlockConfig,
) -> Result<(Matrix<T>, KernelStats<T>)> {
    blocked(inputs, cfg, LrPath::Reordered)
}

/// Same online-softmax loop, but expands `s * V_lr * B` over all `L` rows up
/// front and streams it like a second value cache. Exists to measure the
/// cost that reordering removes.
pub fn flash_attention_expand_first<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    cfg: BlockConfig,
) -> Result<(Matrix<T>, KernelStats<T>)> {
    blocked(inputs, cfg, LrPath::ExpandFirst)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum LrPath {
    Reordered,
    ExpandFirst,
}

fn blocked<T: Scalar>(
    inputs: &AttentionInputs<'_, T>,
    cfg: BlockConfig,
    path: LrPath,
) -> Result<(Matrix<T>, KernelStats<T>)> {
    inputs.validate()?;
    cfg.validate()?;
    let l_c = inputs.q.rows();
    let l = inputs.seq_len();
    let d = inputs.head_dim();
    let r = inputs.rank();
    let inv_sqrt_d = T::one() / T::of_usize(d).sqrt();
    let mut macs = KernelMacs::default();

    let expanded = match path {
        LrPath::ExpandFirst => {
            macs.lr += (l * r * d) as u64;
            Some(inputs.v_lr.scale(inputs.lora_scale).matmul(inputs.b_up)?)
        }
        LrPath::Reordered => None,
    };
    // Width of the second accumulator.
    let acc_w = if expanded.is_some() { d } else { r };

    let mut out = Matrix::zeros(l_c, d);
    let mut denominators = Vec::with_capacity(l_c);

    for q_start in (0..l_c).step_by(cfg.b_r) {
        let q_end = (q_start + cfg.b_r).min(l_c);
        let br = q_end - q_start;
        let mut o = vec![T::zero(); br * d];
        let mut o_lr = vec![T::zero(); br * acc_w];
        let mut m = vec![T::neg_infinity(); br];
        let mut ell = vec![T::zero(); br];
        let mut p = Vec::with_capacity(cfg.b_c);

        for k_start in (0..l).step_by(cfg.b_c) {
            let k_end = (k_start + cfg.b_c).min(l);
            let bc = k_end - k_start;
            macs.qk += (br * bc * d) as u64;
            macs.pv += (br * bc * d) as u64;
            macs.lr += (br * bc * acc_w) as u64;

            for a in 0..br {
                let qi = q_start + a;
                let q_row = inputs.q.row(qi);
                p.clear();
                let mut row_max = T::neg_infinity();
                for key in k_start..k_end {
                    let s = if inputs.is_masked(qi, key) {
                        T::neg_infinity()
                    } else {
                        dot(q_row, inputs.k.row(key)) * inv_sqrt_d
                    };
                    row_max = row_max.max(s);
                    p.push(s);
                }
                let m_new = m[a].max(row_max);
                if m_new == T::neg_infinity() {
                    // Nothing visible yet for this row.
                    continue;
                }
                let alpha = (m[a] - m_new).exp();
                let mut row_sum = T::zero();
                for s in p.iter_mut() {
                    *s = (*s - m_new).exp();
                    row_sum += *s;
                }
                ell[a] = alpha * ell[a] + row_sum;

                let o_row = &mut o[a * d..(a + 1) * d];
                o_row.iter_mut().for_each(|x| *x *= alpha);
                let lr_row = &mut o_lr[a * acc_w..(a + 1) * acc_w];
                lr_row.iter_mut().for_each(|x| *x *= alpha);
                for (off, &pw) in p.iter().enumerate() {
                    let key = k_start + off;
                    axpy(o_row, pw, inputs.v_base.row(key));
                    match &expanded {
                        Some(e) => axpy(lr_row, pw, e.row(key)),
                        None => axpy(lr_row, pw, inputs.v_lr.row(key)),
                    }
                }
                m[a] = m_new;
            }
        }

        if expanded.is_none() {
            // O_i += s * (O_lr,i B), one up-projection per query block.
            macs.lr += (br * r * d) as u64;
        }
        for a in 0..br {
            let o_row = &mut o[a * d..(a + 1) * d];
            let lr_row = &o_lr[a * acc_w..(a + 1) * acc_w];
            match &expanded {
                Some(_) => {
                    for (x, &y) in o_row.iter_mut().zip(lr_row) {
                        *x += y;
                    }
                }
                None => {
                    for (c, &w) in lr_row.iter().enumerate() {
                        axpy(o_row, w * inputs.lora_scale, inputs.b_up.row(c));
                    }
                }
            }
            let dst = out.row_mut(q_start + a);
            for (x, &y) in dst.iter_mut().zip(o_row.iter()) {
                *x = y / ell[a];
            }
            denominators.push(ell[a]);
        }
    }

    Ok((
        out,
        KernelStats {
            macs,
            row_denominators: denominators,
        },
    ))
}

/// Query head `h` reads kv head `h / (n_q / n_kv)`.
#[inline]
pub fn kv_head_for(q_head: usize, n_q_heads: usize, n_kv_heads: usize) -> usize {
    q_head / (n_q_heads / n_kv_heads)
}

/// Multi-head inputs with grouped key/value heads.
#[derive(Debug, Clone, Copy)]
pub struct GqaInputs<'a, T> {
    /// `L_c x (n_q_heads * d_head)`, heads side by side.
    pub q: &'a Matrix<T>,
    /// One `L x d_head` matrix per kv head.
    pub k: &'a [Matrix<T>],
    pub v_base: &'a [Matrix<T>],
    /// `L x r`, shared by all heads of the layer.
    pub v_lr: &'a Matrix<T>,
    /// One `r x d_head` column slice of the up-projection per kv head.
    pub b_up: &'a [Matrix<T>],
    pub lora_scale: T,
    pub query_offset: usize,
    pub n_q_heads: usize,
}

pub fn gqa_attention<T: Scalar>(
    inputs: &GqaInputs<'_, T>,
    cfg: BlockConfig,
) -> Result<(Matrix<T>, KernelMacs)> {
    let n_q = inputs.n_q_heads;
    let n_kv = inputs.k.len();
    if n_kv == 0 || n_q == 0 || !n_q.is_multiple_of(n_kv) {
        return Err(Error::InvalidConfig(format!(
            "query heads ({n_q}) must be a positive multiple of kv heads ({n_kv})"
        )));
    }
    if inputs.v_base.len() != n_kv || inputs.b_up.len() != n_kv {
        return Err(Error::InvalidConfig(format!(
            "expected {n_kv} value / up-projection heads, got {} / {}",
            inputs.v_base.len(),
            inputs.b_up.len()
        )));
    }
    if !inputs.q.cols().is_multiple_of(n_q) {
        return Err(Error::ShapeMismatch {
            op: "gqa_attention: q width not divisible by heads",
            left: inputs.q.shape(),
            right: (n_q, 0),
        });
    }
    let d = inputs.q.cols() / n_q;
    let mut heads = Vec::with_capacity(n_q);
    let mut macs = KernelMacs::default();
    for h in 0..n_q {
        let g = kv_head_for(h, n_q, n_kv);
        let q_h = inputs.q.slice_cols(h * d..(h + 1) * d);
        let head_inputs = AttentionInputs {
            q: &q_h,
            k: &inputs.k[g],
            v_base: &inputs.v_base[g],
            v_lr: inputs.v_lr,
            b_up: &inputs.b_up[g],
            lora_scale: inputs.lora_scale,
            query_offset: inputs.query_offset,
        };
        let (o, stats) = flash_lora_attention_with_stats(&head_inputs, cfg)?;
        macs += stats.macs;
        heads.push(o);
    }
    Ok((Matrix::hstack(&heads)?, macs))
}

/// Summary of a randomized kernel-vs-reference sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub iterations: usize,
    pub seed: u64,
    pub dtype: crate::scalar::Dtype,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
    /// Cases whose error exceeded `tolerance`.
    pub failures: usize,
}

/// Tolerance the blocked kernel must meet against the f64 reference.
pub fn fuzz_tolerance(dtype: crate::scalar::Dtype) -> f64 {
    match dtype {
        crate::scalar::Dtype::F64 => 1e-10,
        crate::scalar::Dtype::F32 => 1e-4,
    }
}

/// Random shapes with `L <= 64`, any offset, rank in {0, 1, 2, 8} and block
/// sizes from 1 up to past `L`. Inputs are drawn in f64 and rounded to `T`;
/// the reference always runs in f64 on the rounded inputs.
pub fn fuzz_kernel<T: Scalar>(iterations: usize, seed: u64) -> Result<FuzzReport> {
    use rand::{Rng, SeedableRng};

    if iterations == 0 {
        return Err(Error::InvalidConfig("iterations must be at least 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    const RANKS: [usize; 4] = [0, 1, 2, 8];
    const DIMS: [usize; 4] = [1, 4, 16, 64];
    const BLOCKS: [usize; 5] = [1, 2, 7, 16, 64];
    let tolerance = fuzz_tolerance(T::DTYPE);
    let (mut worst, mut sum, mut failures) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..iterations {
        let l = rng.random_range(1..=64usize);
        let l_c = rng.random_range(1..=l);
        let offset = rng.random_range(0..=l - l_c);
        let r = RANKS[rng.random_range(0..RANKS.len())];
        let d = DIMS[rng.random_range(0..DIMS.len())];
        let cfg = BlockConfig::new(
            BLOCKS[rng.random_range(0..BLOCKS.len())],
            BLOCKS[rng.random_range(0..BLOCKS.len())],
        )?;
        let q = Matrix::<f64>::random_normal(l_c, d, 1.0, &mut rng).cast::<T>();
        let k = Matrix::<f64>::random_normal(l, d, 1.0, &mut rng).cast::<T>();
        let vb = Matrix::<f64>::random_normal(l, d, 1.0, &mut rng).cast::<T>();
        let vl = Matrix::<f64>::random_normal(l, r, 1.0, &mut rng).cast::<T>();
        let b = Matrix::<f64>::random_normal(r, d, 1.0, &mut rng).cast::<T>();
        let scale = T::of(rng.random_range(0.25..4.0));
        let got = flash_lora_attention(
            &AttentionInputs {
                q: &q,
                k: &k,
                v_base: &vb,
                v_lr: &vl,
                b_up: &b,
                lora_scale: scale,
                query_offset: offset,
            },
            cfg,
        )?;
        let reference = naive_attention(&AttentionInputs {
            q: &q.cast::<f64>(),
            k: &k.cast::<f64>(),
            v_base: &vb.cast::<f64>(),
            v_lr: &vl.cast::<f64>(),
            b_up: &b.cast::<f64>(),
            lora_scale: scale.as_f64(),
            query_offset: offset,
        })?;
        let err = crate::linalg::max_relative_error(&got.cast::<f64>(), &reference)?;
        worst = worst.max(err);
        sum += err;
        if err.is_nan() || err > tolerance {
            failures += 1;
        }
    }
    Ok(FuzzReport {
        iterations,
        seed,
        dtype: T::DTYPE,
        tolerance,
        max_relative_error: worst,
        mean_relative_error: sum / iterations as f64,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Owned {
        q: Matrix<f64>,
        k: Matrix<f64>,
        v_base: Matrix<f64>,
        v_lr: Matrix<f64>,
        b_up: Matrix<f64>,
        offset: usize,
    }

    impl Owned {
        fn random(l: usize, l_c: usize, r: usize, d: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Self {
                q: Matrix::random_normal(l_c, d, 1.0, &mut rng),
                k: Matrix::random_normal(l, d, 1.0, &mut rng),
                v_base: Matrix::random_normal(l, d, 1.0, &mut rng),
                v_lr: Matrix::random_normal(l, r, 1.0, &mut rng),
                b_up: Matrix::random_normal(r, d, 1.0, &mut rng),
                offset: l - l_c,
            }
        }

        fn inputs(&self) -> AttentionInputs<'_, f64> {
            AttentionInputs {
                q: &self.q,
                k: &self.k,
                v_base: &self.v_base,
                v_lr: &self.v_lr,
                b_up: &self.b_up,
                lora_scale: 2.0,
                query_offset: self.offset,
            }
        }
    }

    #[test]
    fn single_token_returns_its_value() {
        let o = Owned::random(1, 1, 2, 4, 1);
        let out = naive_attention(&o.inputs()).unwrap();
        let expect = o
            .v_base
            .add(&o.v_lr.scale(2.0).matmul(&o.b_up).unwrap())
            .unwrap();
        assert!(out.sub(&expect).unwrap().max_abs() < 1e-14);
        let flash = flash_lora_attention(&o.inputs(), BlockConfig::new(1, 1).unwrap()).unwrap();
        assert!(flash.sub(&expect).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn zero_lr_matches_scalar_loop_attention() {
        let mut o = Owned::random(9, 4, 3, 5, 2);
        o.v_lr = Matrix::zeros(9, 3);
        let out = naive_attention(&o.inputs()).unwrap();
        let d = 5.0f64;
        for i in 0..4 {
            let pos = o.offset + i;
            let scores: Vec<f64> = (0..=pos)
                .map(|j| (0..5).map(|c| o.q.get(i, c) * o.k.get(j, c)).sum::<f64>() / d.sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = weights.iter().sum();
            for c in 0..5 {
                let v: f64 = (0..=pos)
                    .map(|j| weights[j] * o.v_base.get(j, c))
                    .sum::<f64>()
                    / z;
                assert!((out.get(i, c) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_query_gives_uniform_average() {
        let mut o = Owned::random(4, 1, 2, 4, 3);
        o.q = Matrix::zeros(1, 4);
        o.offset = 3;
        let out = naive_attention(&o.inputs()).unwrap();
        let values = o
            .v_base
            .add(&o.v_lr.scale(2.0).matmul(&o.b_up).unwrap())
            .unwrap();
        for c in 0..4 {
            let mean = (0..4).map(|j| values.get(j, c)).sum::<f64>() / 4.0;
            assert!((out.get(0, c) - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn first_row_sees_only_token_zero() {
        let mut o = Owned::random(6, 6, 2, 4, 4);
        o.offset = 0;
        let expect_row0 = o
            .v_base
            .slice_rows(0..1)
            .add(&o.v_lr.slice_rows(0..1).scale(2.0).matmul(&o.b_up).unwrap())
            .unwrap();
        for cfg in [
            BlockConfig::new(1, 1).unwrap(),
            BlockConfig::new(4, 3).unwrap(),
        ] {
            let out = flash_lora_attention(&o.inputs(), cfg).unwrap();
            let diff = out.slice_rows(0..1).sub(&expect_row0).unwrap().max_abs();
            assert!(diff < 1e-14, "{diff}");
        }
    }

    #[test]
    fn single_block_equals_naive() {
        let o = Owned::random(20, 7, 4, 8, 5);
        let naive = naive_attention(&o.inputs()).unwrap();
        let flash = flash_lora_attention(&o.inputs(), BlockConfig::new(7, 20).unwrap()).unwrap();
        assert!(max_rel(&flash, &naive) <= 1e-12);
    }

    fn max_rel(x: &Matrix<f64>, y: &Matrix<f64>) -> f64 {
        crate::linalg::max_relative_error(x, y).unwrap()
    }

    #[test]
    fn denominators_match_naive_row_sums() {
        let o = Owned::random(13, 5, 2, 4, 6);
        let (_, stats) =
            flash_lora_attention_with_stats(&o.inputs(), BlockConfig::new(2, 3).unwrap()).unwrap();
        for i in 0..5 {
            let pos = o.offset + i;
            let scores: Vec<f64> = (0..=pos)
                .map(|j| (0..4).map(|c| o.q.get(i, c) * o.k.get(j, c)).sum::<f64>() / 2.0)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            assert!((stats.row_denominators[i] - z).abs() < 1e-12 * z);
        }
    }

    #[test]
    fn mac_counts_match_closed_forms() {
        for (l, l_c, r, d, br, bc) in [
            (13, 5, 2, 4, 2, 3),
            (8, 8, 1, 1, 3, 8),
            (30, 1, 8, 16, 1, 7),
        ] {
            let o = Owned::random(l, l_c, r, d, 7);
            let cfg = BlockConfig::new(br, bc).unwrap();
            let counts = lr_mac_counts(l, l_c, r, d);
            let (_, reordered) = flash_lora_attention_with_stats(&o.inputs(), cfg).unwrap();
            let (_, expanded) = flash_attention_expand_first(&o.inputs(), cfg).unwrap();
            assert_eq!(reordered.macs.lr, counts.reorder);
            assert_eq!(expanded.macs.lr, counts.no_reorder);
            assert_eq!(reordered.macs.qk, (l_c * l * d) as u64);
            assert_eq!(reordered.macs.pv, (l_c * l * d) as u64);
        }
    }

    #[test]
    fn lr_mac_formula_cases() {
        let c = lr_mac_counts(4096, 1, 8, 128);
        assert_eq!(c.no_reorder, 4_718_592);
        assert_eq!(c.reorder, 33_792);
        // L_c = L, r = d_head = 1: both orders cost L^2 + L.
        let l = 37;
        let c = lr_mac_counts(l, l, 1, 1);
        assert_eq!(c.no_reorder, (l * l + l) as u64);
        assert_eq!(c.reorder, (l * l + l) as u64);
        let c = lr_mac_counts(10, 2, 4, 4);
        assert_eq!(c.no_reorder, 10 * 4 * 4 + 2 * 10 * 4);
        assert_eq!(c.reorder, 2 * 10 * 4 + 2 * 4 * 4);
    }

    #[test]
    fn reorder_identity_is_exact_on_integers() {
        let p = Matrix::<f64>::from_fn(3, 5, |i, j| ((i * 5 + j) % 4) as f64);
        let v_lr = Matrix::<f64>::from_fn(5, 2, |i, j| (i as f64) - (j as f64) * 2.0);
        let b = Matrix::<f64>::from_fn(2, 4, |i, j| (i + 2 * j) as f64 - 3.0);
        let expand_first = p.matmul(&v_lr.matmul(&b).unwrap()).unwrap();
        let reordered = p.matmul(&v_lr).unwrap().matmul(&b).unwrap();
        assert_eq!(expand_first, reordered);
    }

    #[test]
    fn shape_and_block_errors() {
        let o = Owned::random(5, 2, 2, 4, 8);
        let mut bad = o.inputs();
        bad.query_offset = 4;
        assert!(matches!(
            naive_attention(&bad),
            Err(Error::ShapeMismatch { .. })
        ));
        // Queries ending before the last key are allowed; later keys are masked.
        bad.query_offset = 1;
        assert!(naive_attention(&bad).is_ok());
        assert!(flash_lora_attention(&o.inputs(), BlockConfig { b_r: 0, b_c: 1 }).is_err());
        assert!(BlockConfig::new(1, 0).is_err());
        let wrong_b = Matrix::zeros(3, 4);
        let mut bad = o.inputs();
        bad.b_up = &wrong_b;
        assert!(flash_lora_attention(&bad, BlockConfig::default()).is_err());
    }

    #[test]
    fn kv_head_mapping() {
        assert_eq!(
            (0..4).map(|h| kv_head_for(h, 4, 2)).collect::<Vec<_>>(),
            vec![0, 0, 1, 1]
        );
        assert_eq!(
            (0..8).map(|h| kv_head_for(h, 8, 2)).collect::<Vec<_>>(),
            vec![0, 0, 0, 0, 1, 1, 1, 1]
        );
        assert_eq!(
            (0..3).map(|h| kv_head_for(h, 3, 3)).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn gqa_rejects_indivisible_heads() {
        let q = Matrix::<f64>::zeros(1, 12);
        let k = vec![Matrix::zeros(1, 4); 2];
        let v_lr = Matrix::zeros(1, 0);
        let b = vec![Matrix::zeros(0, 4); 2];
        let inputs = GqaInputs {
            q: &q,
            k: &k,
            v_base: &k,
            v_lr: &v_lr,
            b_up: &b,
            lora_scale: 1.0,
            query_offset: 0,
            n_q_heads: 3,
        };
        assert!(matches!(
            gqa_attention(&inputs, BlockConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn fuzz_is_seeded_and_within_tolerance() {
        let a = fuzz_kernel::<f64>(50, 9).unwrap();
        assert_eq!(a, fuzz_kernel::<f64>(50, 9).unwrap());
        assert_eq!(a.failures, 0);
        assert!(a.max_relative_error <= 1e-10);
        let f = fuzz_kernel::<f32>(50, 9).unwrap();
        assert_eq!(f.failures, 0);
        assert!(matches!(
            fuzz_kernel::<f64>(0, 1),
            Err(Error::InvalidConfig(_))
        ));
    }
}
