//! Pairwise weight tables and the advantage estimator family.

mod estimators;
mod weights;

pub use estimators::{
    estimator_names, find_estimator, lambda_advantages, mc_advantages, pwr_return_and_advantages,
    pwtd_advantages, td_errors, AdvantageEstimator, Estimate, EstimatorCtx, LambdaEstimator,
    McEstimator, PwrEstimator, PwtdEstimator, WeightsNode,
};
pub use weights::{handcrafted_dag, handcrafted_umbrella, HandcraftedWeights, PairwiseWeightTable};
