use super::DistillError;
use crate::nn::model::{BnTap, ModelGraph, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Sum over BN layers of the squared distances between the batch mean/std
/// taps and the stored running mean/std.
pub fn bns_loss<T: Scalar>(
    g: &mut Graph<T>,
    taps: &[BnTap],
    running: &[&RunningStats<T>],
) -> Result<Var, DistillError> {
    if taps.len() != running.len() {
        return Err(DistillError::Invalid(format!(
            "{} statistic taps for {} BN layers",
            taps.len(),
            running.len()
        )));
    }
    if taps.is_empty() {
        return Err(DistillError::Invalid("no BN layers to match".into()));
    }
    let mut terms = Vec::with_capacity(2 * taps.len());
    for (tap, st) in taps.iter().zip(running) {
        let c = st.mean.len();
        let mu = g.constant(&Tensor::new(vec![c], st.mean.clone())?);
        let sigma = g.constant(&Tensor::new(vec![c], st.std())?);
        for (batch, reference) in [(tap.mean, mu), (tap.std, sigma)] {
            let d = g.sub(batch, reference)?;
            let sq = g.square(d)?;
            terms.push(g.sum(sq)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

impl<T: Scalar> ModelGraph<T> {
    /// Running statistics in forward BN order.
    pub fn running_stats(&self) -> Vec<&RunningStats<T>> {
        self.bn_order.iter().map(|n| &self.bn_stats[n]).collect()
    }
}
