//! Mutual information neural estimation.
//!
//! The Donsker-Varadhan bound `mean T(joint) - log mean exp T(marginal)`
//! with a ReLU critic `T`. The log-mean-exp is shifted by its maximum so
//! large critic outputs cannot overflow.

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam, ParamStore, ScalarMlp};

fn check_scores(joint: usize, marginal: usize) -> Result<()> {
    if joint < 2 || marginal < 2 {
        return Err(Error::Validation(format!(
            "lower bound needs at least 2 joint and 2 marginal pairs, got {joint} and {marginal}"
        )));
    }
    Ok(())
}

/// The bound from critic scores of joint and marginal pairs.
pub fn mine_lower_bound(joint_scores: &[f64], marginal_scores: &[f64]) -> Result<f64> {
    check_scores(joint_scores.len(), marginal_scores.len())?;
    if joint_scores
        .iter()
        .chain(marginal_scores)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("non-finite critic output".into()));
    }
    let mean = joint_scores.iter().sum::<f64>() / joint_scores.len() as f64;
    let top = marginal_scores
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let avg =
        marginal_scores.iter().map(|s| (s - top).exp()).sum::<f64>() / marginal_scores.len() as f64;
    Ok(mean - (top + avg.ln()))
}

/// Tensor form over `(N,)` score vectors; differentiable in both.
pub fn mine_lower_bound_tensor(joint_scores: &Tensor, marginal_scores: &Tensor) -> Result<Tensor> {
    let (nj, nm) = (joint_scores.dim(0)?, marginal_scores.dim(0)?);
    check_scores(nj, nm)?;
    let top = marginal_scores.max(0)?.detach();
    let shifted = marginal_scores.broadcast_sub(&top)?.exp()?.mean(0)?.log()?;
    Ok((joint_scores.mean(0)? - (shifted + top)?)?)
}

/// Critic f_I over concatenated pairs.
pub struct MineCritic {
    store: ParamStore,
    mlp: ScalarMlp,
}

impl MineCritic {
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed, DType::F32);
        let mlp = ScalarMlp::new(input_dim, hidden, &store, "f_i")?;
        Ok(Self { store, mlp })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// `(N, da)` and `(N, db)` row blocks → `(N,)` scores of their concatenation.
    pub fn scores(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.mlp.forward(&Tensor::cat(&[a, b], 1)?)
    }

    /// Bound with joint pairs `(a, b)` and marginal pairs `(a_marginal, b)`.
    pub fn lower_bound(&self, a: &Tensor, a_marginal: &Tensor, b: &Tensor) -> Result<Tensor> {
        let joint = self.scores(a, b)?;
        let marginal = self.scores(a_marginal, b)?;
        mine_lower_bound_tensor(&joint, &marginal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineEstimatorConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for MineEstimatorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50, 50],
            learning_rate: 1e-3,
            steps: 2000,
            batch: 256,
        }
    }
}

fn rows_f32(rows: &[Vec<f64>], idx: &[usize]) -> Result<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    let flat: Vec<f32> = idx
        .iter()
        .flat_map(|&i| rows[i].iter().map(|&v| v as f32))
        .collect();
    Ok(Tensor::from_vec(flat, (idx.len(), width), &Device::Cpu)?)
}

/// Trains a fresh critic on the paired samples `(a[i], b[i])` and returns
/// the bound evaluated on all pairs, with marginals formed by pairing each
/// `b[i]` with a randomly permuted `a`.
pub fn estimate_mutual_information(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    config: &MineEstimatorConfig,
    seed: u64,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "{} samples paired with {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    check_scores(n, n)?;
    let width = a[0].len() + b[0].len();
    let critic = MineCritic::new(width, &config.hidden, seed)?;
    let mut opt = adam(&critic.store, config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0303_1e57);
    let batch = config.batch.clamp(2, n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.steps {
        order.shuffle(&mut rng);
        let joint = &order[..batch];
        let mut other: Vec<usize> = (0..n).collect();
        other.shuffle(&mut rng);
        let bound = critic.lower_bound(
            &rows_f32(a, joint)?,
            &rows_f32(a, &other[..batch])?,
            &rows_f32(b, joint)?,
        )?;
        opt.backward_step(&bound.neg()?)?;
    }
    let all: Vec<usize> = (0..n).collect();
    let mut perm = all.clone();
    perm.shuffle(&mut rng);
    let joint = critic.scores(&rows_f32(a, &all)?, &rows_f32(b, &all)?)?;
    let marginal = critic.scores(&rows_f32(a, &perm)?, &rows_f32(b, &all)?)?;
    let to_vec = |t: Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
    mine_lower_bound(&to_vec(joint)?, &to_vec(marginal)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use proptest::prelude::*;

    #[test]
    fn constant_critic_gives_zero() {
        assert!(mine_lower_bound(&[3.0; 5], &[3.0; 7]).unwrap().abs() < 1e-12);
        assert!(mine_lower_bound(&[1.0], &[1.0, 2.0]).is_err());
        assert!(matches!(
            mine_lower_bound(&[1.0, f64::NAN], &[1.0, 2.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn shift_keeps_huge_scores_finite() {
        // oracle: mean(joint) - (1000 + ln((1 + e^-1) / 2))
        let got = mine_lower_bound(&[1001.0, 1003.0], &[1000.0, 999.0]).unwrap();
        let oracle = 1002.0 - (1000.0 + ((1.0 + (-1f64).exp()) / 2.0).ln());
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn tensor_bound_matches_plain_and_differentiates() {
        let j = [0.3, -0.2, 1.4];
        let m = [0.9, 0.1, -0.5, 2.0];
        let jv = Var::new(&j, &Device::Cpu).unwrap();
        let mv = Var::new(&m, &Device::Cpu).unwrap();
        let t = mine_lower_bound_tensor(jv.as_tensor(), mv.as_tensor()).unwrap();
        assert!((t.to_scalar::<f64>().unwrap() - mine_lower_bound(&j, &m).unwrap()).abs() < 1e-12);
        let grads = t.backward().unwrap();
        let gm = grads.get(&mv).unwrap().to_vec1::<f64>().unwrap();
        for i in 0..m.len() {
            let h = 1e-6;
            let (mut up, mut down) = (m, m);
            up[i] += h;
            down[i] -= h;
            let fd = (mine_lower_bound(&j, &up).unwrap() - mine_lower_bound(&j, &down).unwrap())
                / (2.0 * h);
            assert!((fd - gm[i]).abs() < 1e-7);
        }
        let gj = grads.get(&jv).unwrap().to_vec1::<f64>().unwrap();
        assert!(gj.iter().all(|g| (g - 1.0 / 3.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn bound_is_permutation_invariant(j in prop::collection::vec(-5.0f64..5.0, 2..12), m in prop::collection::vec(-5.0f64..5.0, 2..12), seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut j2, mut m2) = (j.clone(), m.clone());
            j2.shuffle(&mut rng);
            m2.shuffle(&mut rng);
            let a = mine_lower_bound(&j, &m).unwrap();
            let b = mine_lower_bound(&j2, &m2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn critic_shapes() {
        let critic = MineCritic::new(3, &[4, 4], 0).unwrap();
        let a = Tensor::zeros((5, 2), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::ones((5, 1), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(critic.scores(&a, &b).unwrap().dims(), &[5]);
        assert_eq!(
            critic.lower_bound(&a, &a, &b).unwrap().dims(),
            &[] as &[usize]
        );
        assert!(critic.scores(&a, &a).is_err());
    }
}
