//! Reference explainers with known causality behaviour, used to check the
//! evaluation harness itself.

use super::{Explainer, ExplanationMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returns the same fixed ramp for every input, so randomizing the input
/// never changes the explanation.
pub struct ConstantExplainer;

/// Returns |x|, so the explanation moves with every randomized cell.
pub struct InputExplainer;

fn check(instances: &[Tensor], classes: &[usize]) -> Result<()> {
    if instances.len() != classes.len() {
        return Err(Error::Usage(format!(
            "{} instances but {} target classes",
            instances.len(),
            classes.len()
        )));
    }
    Ok(())
}

impl Explainer for ConstantExplainer {
    fn id(&self) -> String {
        "constant".into()
    }

    fn explain_batch(
        &self,
        instances: &[Tensor],
        classes: &[usize],
    ) -> Result<Vec<ExplanationMap>> {
        check(instances, classes)?;
        Ok(instances
            .iter()
            .zip(classes)
            .map(|(x, &c)| {
                let ramp = (0..x.numel()).map(|i| (i % 7) as f64).collect();
                ExplanationMap::new(Tensor::new(x.shape(), ramp).unwrap(), "constant", c)
            })
            .collect())
    }
}

impl Explainer for InputExplainer {
    fn id(&self) -> String {
        "input".into()
    }

    fn explain_batch(
        &self,
        instances: &[Tensor],
        classes: &[usize],
    ) -> Result<Vec<ExplanationMap>> {
        check(instances, classes)?;
        Ok(instances
            .iter()
            .zip(classes)
            .map(|(x, &c)| ExplanationMap::new(x.map(f64::abs), "input", c))
            .collect())
    }
}
