//! Pairwise weight tables.
//!
//! A weight w_ij says how much the reward (or TD error) obtained on the
//! transition into state j contributes to the return credited at state i.
//! Learned tables store raw meta-parameters eta and expose the sigmoid view,
//! so weights always live in (0, 1); handcrafted tables are fixed matrices.

use rand::{Rng, RngCore};

use crate::diffmath::{DiffValue, Mat, Tape};
use crate::envs::{DagStateKind, EpisodicMdp, NestedDag, UmbrellaChain};
use crate::{CoreError, Result};

/// Learnable meta-parameters: a num_states x num_states matrix eta with the
/// pairwise weight view sigmoid(eta). Row = state credited, column = state
/// whose entering transition pays the reward.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseWeightTable {
    eta: Mat,
}

impl PairwiseWeightTable {
    /// Initialize eta from Uniform[-0.01, 0.01], putting every weight within
    /// sigmoid(+-0.01) of 0.5.
    pub fn init(num_states: usize, rng: &mut dyn RngCore) -> Self {
        let data = (0..num_states * num_states)
            .map(|_| rng.random_range(-0.01..=0.01))
            .collect();
        PairwiseWeightTable { eta: Mat::from_vec(num_states, num_states, data) }
    }

    pub fn from_eta(eta: Mat) -> Result<Self> {
        if eta.rows() != eta.cols() {
            return Err(CoreError::Invalid(format!(
                "eta must be square, got {}x{}",
                eta.rows(),
                eta.cols()
            )));
        }
        if !eta.is_all_finite() {
            return Err(CoreError::NonFinite { context: "eta".into() });
        }
        Ok(PairwiseWeightTable { eta })
    }

    pub fn num_states(&self) -> usize {
        self.eta.rows()
    }

    pub fn eta(&self) -> &Mat {
        &self.eta
    }

    pub fn eta_mut(&mut self) -> &mut Mat {
        &mut self.eta
    }

    /// The squashed weight matrix sigmoid(eta).
    pub fn weights(&self) -> Mat {
        let mut tape = Tape::new();
        let e = tape.constant(self.eta.clone()).expect("finite eta");
        let w = tape.sigmoid(e).expect("sigmoid");
        tape.value(w).clone()
    }

    /// Register eta as a differentiable leaf and return (eta node, weight
    /// node). Gradients of anything built from the weight node flow to eta.
    pub fn tape_weights(&self, tape: &mut Tape) -> Result<(DiffValue, DiffValue)> {
        let eta = tape.param(self.eta.clone())?;
        let w = tape.sigmoid(eta)?;
        Ok((eta, w))
    }
}

/// A fixed weight matrix with entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct HandcraftedWeights {
    w: Mat,
}

impl HandcraftedWeights {
    pub fn from_matrix(w: Mat) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(CoreError::Invalid(format!(
                "weight matrix must be square, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        if w.as_slice().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(CoreError::Invalid("weights must lie in [0, 1]".into()));
        }
        Ok(HandcraftedWeights { w })
    }

    pub fn num_states(&self) -> usize {
        self.w.rows()
    }

    pub fn weights(&self) -> &Mat {
        &self.w
    }

    /// Register the fixed matrix as a non-differentiable weight node.
    pub fn tape_weights(&self, tape: &mut Tape) -> Result<DiffValue> {
        Ok(tape.constant(self.w.clone())?)
    }
}

/// Umbrella oracle weights: credit the initial state with the final reward
/// and nothing else (w[0][final] = 1, all other entries 0).
pub fn handcrafted_umbrella(env: &UmbrellaChain) -> HandcraftedWeights {
    let n = env.length() + 1;
    let mut w = Mat::zeros(n, n);
    w[(0, env.final_state())] = 1.0;
    HandcraftedWeights { w }
}

/// DAG oracle weights: w[i][j] = 1 exactly when the reward on the transition
/// entering j is decided by the action taken at i, i.e. i is a phase-1 state
/// at step k and j is a reveal state of the segment that replays decision k.
pub fn handcrafted_dag(env: &NestedDag) -> HandcraftedWeights {
    let n = env.num_states();
    let mut w = Mat::zeros(n, n);
    for i in 0..n {
        if let DagStateKind::Decision { step, .. } = env.classify(i) {
            let segment = env.depth() - 1 - step;
            w[(i, env.reveal_state(segment, 0))] = 1.0;
            w[(i, env.reveal_state(segment, 1))] = 1.0;
        }
    }
    HandcraftedWeights { w }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{dag_make, dag_reachable_pairs, umbrella_make};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_weights_start_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = PairwiseWeightTable::init(12, &mut rng);
        let w = table.weights();
        for &x in w.as_slice() {
            assert!((0.4975..=0.5025).contains(&x), "weight {x} out of init band");
        }
    }

    #[test]
    fn zero_eta_gives_exactly_half() {
        let table = PairwiseWeightTable::from_eta(Mat::zeros(3, 3)).unwrap();
        assert!(table.weights().as_slice().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = PairwiseWeightTable::init(5, &mut ChaCha8Rng::seed_from_u64(7));
        let b = PairwiseWeightTable::init(5, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn umbrella_weights_single_entry() {
        let env = umbrella_make(6, 0.0, 1.0, 0).unwrap();
        let hw = handcrafted_umbrella(&env);
        let w = hw.weights();
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                let expected = if i == 0 && j == env.final_state() { 1.0 } else { 0.0 };
                assert_eq!(w[(i, j)], expected);
            }
        }
    }

    #[test]
    fn dag_weights_smallest_instance() {
        let env = dag_make(1, 0, 0).unwrap();
        let w = handcrafted_dag(&env);
        let m = w.weights();
        assert_eq!(m[(0, env.reveal_state(0, 0))], 1.0);
        assert_eq!(m[(0, env.reveal_state(0, 1))], 1.0);
        assert_eq!(m.as_slice().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn dag_weights_rows_match_reveal_segments() {
        let env = dag_make(8, 3, 0).unwrap();
        let table = handcrafted_dag(&env);
        let m = table.weights();
        for i in 0..env.num_states() {
            match env.classify(i) {
                DagStateKind::Decision { step, .. } => {
                    let segment = env.depth() - 1 - step;
                    for j in 0..env.num_states() {
                        let expected = if j == env.reveal_state(segment, 0)
                            || j == env.reveal_state(segment, 1)
                        {
                            1.0
                        } else {
                            0.0
                        };
                        assert_eq!(m[(i, j)], expected, "entry ({i}, {j})");
                    }
                }
                _ => assert!(m.row(i).iter().all(|&x| x == 0.0)),
            }
        }
    }

    #[test]
    fn dag_weights_respect_visit_order() {
        // Nonzero entries only where j is reachable after i.
        let env = dag_make(5, 9, 0).unwrap();
        let table = handcrafted_dag(&env);
        let m = table.weights();
        let reach = dag_reachable_pairs(&env);
        for i in 0..env.num_states() {
            for j in 0..env.num_states() {
                if m[(i, j)] != 0.0 {
                    assert!(reach[i][j], "weight at unreachable pair ({i}, {j})");
                }
            }
        }
    }
}
