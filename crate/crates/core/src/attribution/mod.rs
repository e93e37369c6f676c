//! CAM-family attribution.
//!
//! Every method reads one rank-4 activation (B, F, R, L) from the model's
//! registry, weights its channels (a channel is one (filter, row) pair, the
//! unit the classifier head pools), combines them on the R x L grid, applies
//! ReLU and projects the result onto the D x T input grid.

mod methods;
pub mod stubs;
pub mod weights;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{MapGeometry, Model};
use crate::tensor::Tensor;

pub use methods::smooth_grad_cam_pp_with_noise;
use weights::Layout;

/// Intermediate result of a method: the activation it read, the gradient of
/// the target logit (empty for gradient-free methods) and one weight per
/// channel.
#[derive(Clone, Debug)]
pub struct ChannelWeights {
    pub layout: Layout,
    pub geometry: MapGeometry,
    pub activations: Vec<f64>,
    pub gradients: Vec<f64>,
    pub weights: Vec<f64>,
    /// Target logit on the unmodified instance.
    pub score: f64,
}

impl ChannelWeights {
    /// ReLU of the weighted channel sum, projected to D x T.
    pub fn map(&self) -> Tensor {
        self.geometry.project(&weights::combine(
            self.layout,
            &self.activations,
            &self.weights,
        ))
    }
}

/// Value scaling applied to an explanation map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Raw,
    /// Affine map onto [0, 1]; a flat map becomes all zeros.
    MinMax,
    /// Divide by the total; an all-zero map stays zero.
    Sum1,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "minmax" => Ok(Self::MinMax),
            "sum1" => Ok(Self::Sum1),
            _ => Err(Error::Config(format!(
                "unknown normalization `{s}` (raw, minmax, sum1)"
            ))),
        }
    }
}

/// A D x T saliency map aligned with its input instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMap {
    pub values: Tensor,
    pub method: String,
    pub target_class: usize,
    pub normalization: Normalization,
}

impl ExplanationMap {
    pub fn new(values: Tensor, method: impl Into<String>, target_class: usize) -> Self {
        Self {
            values,
            method: method.into(),
            target_class,
            normalization: Normalization::Raw,
        }
    }

    pub fn normalized(&self, mode: Normalization) -> Self {
        normalize_map(self, mode)
    }
}

pub fn normalize_map(map: &ExplanationMap, mode: Normalization) -> ExplanationMap {
    let v = &map.values;
    let values = match mode {
        Normalization::Raw => v.clone(),
        Normalization::MinMax => {
            let (lo, hi) = (v.min(), v.max());
            if hi > lo {
                v.map(|x| (x - lo) / (hi - lo))
            } else {
                Tensor::zeros(v.shape())
            }
        }
        Normalization::Sum1 => {
            let total = v.sum();
            if total != 0.0 {
                v.map(|x| x / total)
            } else {
                v.clone()
            }
        }
    };
    ExplanationMap {
        values,
        method: map.method.clone(),
        target_class: map.target_class,
        normalization: mode,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Cam,
    GradCam,
    GradCamPp,
    SmoothGradCamPp,
    XGradCam,
    AblationCam,
    ScoreCam,
    IntegratedScoreCam,
    ActivationSmoothedScoreCam,
    InputSmoothedScoreCam,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Cam,
        Method::GradCam,
        Method::GradCamPp,
        Method::SmoothGradCamPp,
        Method::XGradCam,
        Method::AblationCam,
        Method::ScoreCam,
        Method::IntegratedScoreCam,
        Method::ActivationSmoothedScoreCam,
        Method::InputSmoothedScoreCam,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Cam => "cam",
            Method::GradCam => "grad_cam",
            Method::GradCamPp => "grad_cam_pp",
            Method::SmoothGradCamPp => "smooth_grad_cam_pp",
            Method::XGradCam => "xgrad_cam",
            Method::AblationCam => "ablation_cam",
            Method::ScoreCam => "score_cam",
            Method::IntegratedScoreCam => "integrated_score_cam",
            Method::ActivationSmoothedScoreCam => "activation_smoothed_score_cam",
            Method::InputSmoothedScoreCam => "input_smoothed_score_cam",
        }
    }

    pub fn valid_ids() -> String {
        Self::ALL.map(Method::id).join(", ")
    }

    /// Maps for a single instance.
    pub fn explain(
        self,
        ctx: &CamContext<'_>,
        instance: &Tensor,
        class: usize,
    ) -> Result<ExplanationMap> {
        let mut out = self.explain_batch(ctx, std::slice::from_ref(instance), &[class])?;
        Ok(out.pop().unwrap())
    }

    /// Maps for many instances, computed in parallel and returned in input order.
    pub fn explain_batch(
        self,
        ctx: &CamContext<'_>,
        instances: &[Tensor],
        classes: &[usize],
    ) -> Result<Vec<ExplanationMap>> {
        let parts = self.weights_batch(ctx, instances, classes)?;
        Ok(parts
            .into_iter()
            .zip(classes)
            .map(|(w, &c)| ExplanationMap::new(w.map(), self.id(), c).normalized(ctx.normalization))
            .collect())
    }

    /// Channel weights for one instance.
    pub fn weights(
        self,
        ctx: &CamContext<'_>,
        instance: &Tensor,
        class: usize,
    ) -> Result<ChannelWeights> {
        let mut out = self.weights_batch(ctx, std::slice::from_ref(instance), &[class])?;
        Ok(out.pop().unwrap())
    }

    fn weights_batch(
        self,
        ctx: &CamContext<'_>,
        instances: &[Tensor],
        classes: &[usize],
    ) -> Result<Vec<ChannelWeights>> {
        ctx.validate()?;
        if instances.len() != classes.len() {
            return Err(Error::Usage(format!(
                "{} instances but {} target classes",
                instances.len(),
                classes.len()
            )));
        }
        let k = ctx.model.config().n_classes;
        if let Some(&class) = classes.iter().find(|&&c| c >= k) {
            return Err(Error::ClassOutOfRange {
                class,
                n_classes: k,
            });
        }
        Ok(match self {
            Method::Cam | Method::GradCam | Method::GradCamPp | Method::XGradCam => {
                let bs = ctx.batch_size.max(1);
                let parts: Vec<Vec<ChannelWeights>> = instances
                    .par_chunks(bs)
                    .zip(classes.par_chunks(bs))
                    .map(|(xs, cs)| methods::gradient_family(self, ctx, xs, cs))
                    .collect::<Result<_>>()?;
                parts.into_iter().flatten().collect()
            }
            _ => instances
                .par_iter()
                .zip(classes.par_iter())
                .map(|(x, &c)| methods::per_instance(self, ctx, x, c))
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::UnknownMethod {
                name: s.to_string(),
                valid: Self::valid_ids(),
            })
    }
}

pub const DEFAULT_ACTIVATION: &str = "pre_gap_maps";

/// Settings shared by all methods.
#[derive(Clone, Debug)]
pub struct CamContext<'m> {
    pub model: &'m Model,
    /// Registry key of the maps the methods read.
    pub activation: String,
    /// Noisy copies for the smoothed variants (n).
    pub samples: usize,
    /// Noise standard deviation as a fraction of the value range (input range
    /// for input noise, activation range for activation noise).
    pub noise: f64,
    /// Integration steps (m).
    pub steps: usize,
    pub seed: u64,
    pub normalization: Normalization,
    /// Largest batch handed to one forward pass.
    pub batch_size: usize,
}

impl<'m> CamContext<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            activation: DEFAULT_ACTIVATION.to_string(),
            samples: 8,
            noise: 0.1,
            steps: 8,
            seed: 0,
            normalization: Normalization::Raw,
            batch_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.steps == 0 || !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config(format!(
                "need samples >= 1, steps >= 1 and a finite noise >= 0 (got {}, {}, {})",
                self.samples, self.steps, self.noise
            )));
        }
        Ok(())
    }
}

/// Anything that turns instances into explanation maps. The ten CAM methods
/// implement it through [`MethodExplainer`]; evaluation code accepts any
/// implementation, which is how reference stubs are plugged in.
pub trait Explainer: Sync {
    fn id(&self) -> String;

    fn explain_batch(&self, instances: &[Tensor], classes: &[usize])
        -> Result<Vec<ExplanationMap>>;
}

pub struct MethodExplainer<'m> {
    pub method: Method,
    pub ctx: CamContext<'m>,
}

impl<'m> MethodExplainer<'m> {
    pub fn new(method: Method, ctx: CamContext<'m>) -> Self {
        Self { method, ctx }
    }
}

impl Explainer for MethodExplainer<'_> {
    fn id(&self) -> String {
        self.method.id().to_string()
    }

    fn explain_batch(
        &self,
        instances: &[Tensor],
        classes: &[usize],
    ) -> Result<Vec<ExplanationMap>> {
        self.method.explain_batch(&self.ctx, instances, classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> ExplanationMap {
        ExplanationMap::new(Tensor::new(&[2, 2], v.to_vec()).unwrap(), "x", 0)
    }

    #[test]
    fn sum1_of_a_constant_map() {
        let m = map(&[3.0; 4]).normalized(Normalization::Sum1);
        assert_eq!(m.values.data(), &[0.25; 4]);
    }

    #[test]
    fn minmax_of_a_ramp() {
        let m = map(&[0.0, 1.0, 2.0, 3.0]).normalized(Normalization::MinMax);
        assert_eq!(m.values.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn ids_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
        }
        match "gradcam".parse::<Method>() {
            Err(Error::UnknownMethod { valid, .. }) => assert!(valid.contains("grad_cam_pp")),
            other => panic!("{other:?}"),
        }
    }
}
