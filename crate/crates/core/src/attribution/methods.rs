use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::weights::{self, Layout};
use super::{CamContext, ChannelWeights, ExplanationMap, Method, DEFAULT_ACTIVATION};
use crate::error::{Error, Result};
use crate::models::{MapGeometry, Mode};
use crate::tensor::Tensor;

/// Activations (and optionally gradients of the target logit) of one instance.
struct Probe {
    layout: Layout,
    geometry: MapGeometry,
    acts: Vec<f64>,
    grads: Vec<f64>,
    logit: f64,
}

fn probe(
    ctx: &CamContext<'_>,
    inputs: &[Tensor],
    classes: &[usize],
    with_grads: bool,
) -> Result<Vec<Probe>> {
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let batch = Tensor::stack(&refs)?;
    let pass = ctx.model.forward(&batch, Mode::Eval, None)?;
    let act = pass.activation(&ctx.activation)?;
    let shape = pass.tape.shape(act).to_vec();
    if shape.len() != 4 {
        return Err(Error::Usage(format!(
            "activation `{}` has shape {shape:?}; CAM methods need (B, F, R, L) maps",
            ctx.activation
        )));
    }
    let layout = Layout {
        filters: shape[1],
        rows: shape[2],
        len: shape[3],
    };
    let geometry = ctx.model.geometry_for(layout.rows, layout.len)?;
    let grads = if with_grads {
        let logits = pass.tape.value(pass.logits);
        let k = logits.shape()[1];
        let mut seed = Tensor::zeros(logits.shape());
        for (b, &c) in classes.iter().enumerate() {
            seed.data_mut()[b * k + c] = 1.0;
        }
        Some(
            pass.tape
                .backward_seeded(pass.logits, &seed)?
                .get_or_zeros(&pass.tape, act),
        )
    } else {
        None
    };
    let acts = pass.tape.value(act).data();
    let n = layout.numel();
    Ok((0..inputs.len())
        .map(|b| Probe {
            layout,
            geometry,
            acts: acts[b * n..(b + 1) * n].to_vec(),
            grads: grads
                .as_ref()
                .map_or_else(Vec::new, |g| g.data()[b * n..(b + 1) * n].to_vec()),
            logit: pass.logits_of(b).data()[classes[b]],
        })
        .collect())
}

fn finish(p: Probe, weights: Vec<f64>) -> ChannelWeights {
    ChannelWeights {
        layout: p.layout,
        geometry: p.geometry,
        activations: p.acts,
        gradients: p.grads,
        weights,
        score: p.logit,
    }
}

fn cubes(g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        g.iter().map(|g| g * g).collect(),
        g.iter().map(|g| g * g * g).collect(),
    )
}

pub(super) fn gradient_family(
    method: Method,
    ctx: &CamContext<'_>,
    xs: &[Tensor],
    cs: &[usize],
) -> Result<Vec<ChannelWeights>> {
    let probes = probe(ctx, xs, cs, method != Method::Cam)?;
    probes
        .into_iter()
        .zip(cs)
        .map(|(p, &c)| {
            let w = match method {
                Method::Cam => cam_weights(ctx, &p, c)?,
                Method::GradCam => weights::grad_cam(p.layout, &p.grads),
                Method::GradCamPp => {
                    let (g2, g3) = cubes(&p.grads);
                    weights::grad_cam_pp(p.layout, &p.acts, &p.grads, &g2, &g3)
                }
                Method::XGradCam => weights::xgrad_cam(p.layout, &p.acts, &p.grads),
                _ => unreachable!("not a single-pass gradient method"),
            };
            Ok(finish(p, w))
        })
        .collect()
}

/// Dense-layer weights of class `c`, one per pooled (filter, row) channel.
fn cam_weights(ctx: &CamContext<'_>, p: &Probe, c: usize) -> Result<Vec<f64>> {
    if ctx.activation != DEFAULT_ACTIVATION {
        return Err(Error::Usage(format!(
            "cam reads the classifier weights and needs `{DEFAULT_ACTIVATION}`, not `{}`",
            ctx.activation
        )));
    }
    let w = ctx.model.params().get("head.dense.w");
    if w.shape()[1] != p.layout.channels() {
        return Err(Error::dim(
            "cam",
            format!(
                "{} pooled channels, dense layer expects {}",
                p.layout.channels(),
                w.shape()[1]
            ),
        ));
    }
    Ok(w.row(c).to_vec())
}

pub(super) fn per_instance(
    method: Method,
    ctx: &CamContext<'_>,
    x: &Tensor,
    c: usize,
) -> Result<ChannelWeights> {
    match method {
        Method::SmoothGradCamPp => {
            let noisy = noisy_inputs(ctx, x)?;
            smooth(ctx, x, c, noisy)
        }
        Method::AblationCam => ablation(ctx, x, c),
        Method::ScoreCam
        | Method::IntegratedScoreCam
        | Method::ActivationSmoothedScoreCam
        | Method::InputSmoothedScoreCam => score_family(method, ctx, x, c),
        _ => Ok(gradient_family(method, ctx, std::slice::from_ref(x), &[c])?
            .pop()
            .unwrap()),
    }
}

fn range(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    hi - lo
}

/// `n` draws of N(0, sigma) tensors shaped like `like`, from the context seed.
fn noise_draws(ctx: &CamContext<'_>, sigma: f64, shape: &[usize]) -> Result<Vec<Vec<f64>>> {
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let n: usize = shape.iter().product();
    Ok((0..ctx.samples)
        .map(|_| (0..n).map(|_| dist.sample(&mut rng)).collect())
        .collect())
}

/// The inputs a smoothed method evaluates: the instance itself when the
/// noise is zero, otherwise `n` perturbed copies.
fn noisy_inputs(ctx: &CamContext<'_>, x: &Tensor) -> Result<Vec<Tensor>> {
    let sigma = ctx.noise * range(x.data());
    if sigma == 0.0 {
        return Ok(vec![x.clone()]);
    }
    noise_draws(ctx, sigma, x.shape())?
        .into_iter()
        .map(|e| {
            Tensor::new(
                x.shape(),
                x.data().iter().zip(e).map(|(a, b)| a + b).collect(),
            )
        })
        .collect()
}

fn mean_of(parts: &[Vec<f64>]) -> Vec<f64> {
    let n = parts.len() as f64;
    (0..parts[0].len())
        .map(|i| parts.iter().map(|p| p[i]).sum::<f64>() / n)
        .collect()
}

fn smooth(
    ctx: &CamContext<'_>,
    x: &Tensor,
    c: usize,
    noisy: Vec<Tensor>,
) -> Result<ChannelWeights> {
    let mut inputs = Vec::with_capacity(noisy.len() + 1);
    inputs.push(x.clone());
    inputs.extend(noisy);
    let classes = vec![c; inputs.len()];
    let mut probes = Vec::with_capacity(inputs.len());
    for (xs, cs) in inputs
        .chunks(ctx.batch_size.max(1))
        .zip(classes.chunks(ctx.batch_size.max(1)))
    {
        probes.extend(probe(ctx, xs, cs, true)?);
    }
    let mut probes = probes.into_iter();
    let base = probes.next().unwrap();
    let (mut d1, mut d2, mut d3) = (Vec::new(), Vec::new(), Vec::new());
    for p in probes {
        let (g2, g3) = cubes(&p.grads);
        d1.push(p.grads);
        d2.push(g2);
        d3.push(g3);
    }
    let w = weights::grad_cam_pp(
        base.layout,
        &base.acts,
        &mean_of(&d1),
        &mean_of(&d2),
        &mean_of(&d3),
    );
    Ok(finish(base, w))
}

/// Smooth Grad-CAM++ with caller-supplied perturbations: gradient moments
/// are averaged over `instance + noise[i]`, activations come from the clean
/// instance.
pub fn smooth_grad_cam_pp_with_noise(
    ctx: &CamContext<'_>,
    instance: &Tensor,
    class: usize,
    noise: &[Tensor],
) -> Result<ExplanationMap> {
    ctx.validate()?;
    let k = ctx.model.config().n_classes;
    if class >= k {
        return Err(Error::ClassOutOfRange {
            class,
            n_classes: k,
        });
    }
    if noise.is_empty() {
        return Err(Error::Config(
            "at least one noise sample is required".into(),
        ));
    }
    let noisy = noise
        .iter()
        .map(|e| {
            if e.shape() != instance.shape() {
                return Err(Error::dim(
                    "smooth_grad_cam_pp",
                    format!("noise {:?} vs instance {:?}", e.shape(), instance.shape()),
                ));
            }
            Tensor::new(
                instance.shape(),
                instance
                    .data()
                    .iter()
                    .zip(e.data())
                    .map(|(a, b)| a + b)
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let values = smooth(ctx, instance, class, noisy)?.map();
    Ok(
        ExplanationMap::new(values, Method::SmoothGradCamPp.id(), class)
            .normalized(ctx.normalization),
    )
}

/// Target logits of `inputs`, chunked through the model.
fn logits(ctx: &CamContext<'_>, inputs: &[Tensor], c: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(ctx.batch_size.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let pass = ctx
            .model
            .forward(&Tensor::stack(&refs)?, Mode::Eval, None)?;
        for b in 0..chunk.len() {
            out.push(pass.logits_of(b).data()[c]);
        }
    }
    Ok(out)
}

fn ablation(ctx: &CamContext<'_>, x: &Tensor, c: usize) -> Result<ChannelWeights> {
    let p = probe(ctx, std::slice::from_ref(x), &[c], false)?
        .pop()
        .unwrap();
    let channels: Vec<usize> = (0..p.layout.channels()).collect();
    let mut ablated = Vec::with_capacity(channels.len());
    for ks in channels.chunks(ctx.batch_size.max(1)) {
        let refs = vec![x; ks.len()];
        let batch = Tensor::stack(&refs)?;
        let (layout, key) = (p.layout, ctx.activation.as_str());
        let mut zero = |name: &str, v: &Tensor| {
            (name == key).then(|| {
                let mut t = v.clone();
                let n = layout.numel();
                for (b, &k) in ks.iter().enumerate() {
                    t.data_mut()[b * n + k * layout.len..][..layout.len].fill(0.0);
                }
                t
            })
        };
        let pass = ctx.model.forward(&batch, Mode::Eval, Some(&mut zero))?;
        ablated.extend((0..ks.len()).map(|b| pass.logits_of(b).data()[c]));
    }
    let w = weights::ablation(p.logit, &ablated);
    Ok(finish(p, w))
}

/// The D x T mask of channel `k` carrying `cells` on its own row.
fn channel_mask(p: &Probe, k: usize, cells: &[f64]) -> Tensor {
    let l = p.layout.len;
    let mut grid = vec![0.0; p.layout.rows * l];
    grid[p.layout.row_of(k) * l..][..l].copy_from_slice(cells);
    p.geometry.project(&grid)
}

fn hadamard(x: &Tensor, m: &Tensor, scale: f64) -> Tensor {
    Tensor::new(
        x.shape(),
        x.data()
            .iter()
            .zip(m.data())
            .map(|(a, b)| a * b * scale)
            .collect(),
    )
    .unwrap()
}

fn score_family(
    method: Method,
    ctx: &CamContext<'_>,
    x: &Tensor,
    c: usize,
) -> Result<ChannelWeights> {
    let p = probe(ctx, std::slice::from_ref(x), &[c], false)?
        .pop()
        .unwrap();
    let channels = p.layout.channels();
    let live: Vec<usize> = (0..channels)
        .filter(|&k| weights::minmax(p.layout.cells(&p.acts, k)).is_some())
        .collect();
    let masks = |acts: &[f64]| -> Vec<Tensor> {
        live.iter()
            .map(|&k| {
                let cells = p.layout.cells(acts, k);
                let h = weights::minmax(cells).unwrap_or_else(|| vec![0.0; cells.len()]);
                channel_mask(&p, k, &h)
            })
            .collect()
    };

    // inputs[r * live.len() + j] is repetition r of live channel j
    let mut inputs = Vec::new();
    let reps = match method {
        Method::ScoreCam => {
            inputs.extend(masks(&p.acts).iter().map(|m| hadamard(x, m, 1.0)));
            1
        }
        Method::IntegratedScoreCam => {
            let base = masks(&p.acts);
            for j in 1..=ctx.steps {
                let s = j as f64 / ctx.steps as f64;
                inputs.extend(base.iter().map(|m| hadamard(x, m, s)));
            }
            ctx.steps
        }
        Method::InputSmoothedScoreCam => {
            let base = masks(&p.acts);
            let noisy = noisy_inputs(ctx, x)?;
            for xn in &noisy {
                inputs.extend(base.iter().map(|m| hadamard(xn, m, 1.0)));
            }
            noisy.len()
        }
        Method::ActivationSmoothedScoreCam => {
            let sigma = ctx.noise * range(&p.acts);
            if sigma == 0.0 {
                inputs.extend(masks(&p.acts).iter().map(|m| hadamard(x, m, 1.0)));
                1
            } else {
                for e in noise_draws(ctx, sigma, &[p.acts.len()])? {
                    let noisy: Vec<f64> = p.acts.iter().zip(e).map(|(a, b)| a + b).collect();
                    inputs.extend(masks(&noisy).iter().map(|m| hadamard(x, m, 1.0)));
                }
                ctx.samples
            }
        }
        _ => unreachable!("not a score method"),
    };
    let ys = logits(ctx, &inputs, c)?;
    let mut scores = vec![None; channels];
    for (j, &k) in live.iter().enumerate() {
        let total: f64 = (0..reps).map(|r| ys[r * live.len() + j]).sum();
        scores[k] = Some(total / reps as f64);
    }
    let w = weights::score_softmax(&scores);
    Ok(finish(p, w))
}
