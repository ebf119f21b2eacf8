//! One episode's worth of experience.

/// States, actions, and rewards of a complete episode. Rewards are aligned so
/// that `rewards[t]` follows `(states[t], actions[t])`; `states` has one more
/// entry than the others (the state entered on the final transition).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Behavior log-probabilities recorded at sampling time.
    pub log_probs: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        states: Vec<usize>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        log_probs: Vec<f64>,
    ) -> Self {
        assert!(!actions.is_empty(), "empty trajectory");
        assert_eq!(states.len(), actions.len() + 1);
        assert_eq!(rewards.len(), actions.len());
        assert_eq!(log_probs.len(), actions.len());
        Trajectory { states, actions, rewards, log_probs }
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Undiscounted episode return.
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Discounted returns-to-go G_t for t = 0..T-1.
    pub fn returns(&self, gamma: f64) -> Vec<f64> {
        let t_len = self.len();
        let mut g = vec![0.0; t_len];
        let mut acc = 0.0;
        for t in (0..t_len).rev() {
            acc = self.rewards[t] + gamma * acc;
            g[t] = acc;
        }
        g
    }
}
