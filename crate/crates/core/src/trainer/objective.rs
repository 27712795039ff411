//! Per-patient loss and its gradient with respect to every model parameter.

use ndarray::{Array1, Array2};

use super::{TrainerConfig, TrainingMode};
use crate::model::{class_maps, class_scores_backward, dropout_mask, FeatureMaps, Model, ModelGrads};
use crate::sam::SamPass;
use crate::sncm::NoisyPass;
use crate::{derive_seed, one_hot, Error, Result, NUM_CLASSES};

/// Loss components for one patient (or a batch mean).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub noisy: f64,
}

/// The loss-relevant subset of [`TrainerConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub section_len: usize,
    pub k: usize,
    pub lambda: f64,
    pub dropout_rate: f64,
    pub enable_cls_loss: bool,
    pub enable_noisy_loss: bool,
    pub mode: TrainingMode,
}

impl From<&TrainerConfig> for ObjectiveSettings {
    fn from(c: &TrainerConfig) -> Self {
        Self {
            section_len: c.section_len,
            k: c.k,
            lambda: c.lambda,
            dropout_rate: c.dropout_rate,
            enable_cls_loss: c.enable_cls_loss,
            enable_noisy_loss: c.enable_noisy_loss,
            mode: c.mode,
        }
    }
}

/// `L = L_cls + λ · L_noisy`; a disabled term contributes nothing.
pub fn total_loss(cls: f64, noisy: f64, lambda: f64, enable_cls: bool, enable_noisy: bool) -> Result<f64> {
    let cls = if enable_cls { cls } else { 0.0 };
    let noisy = if enable_noisy { noisy } else { 0.0 };
    if !cls.is_finite() || !noisy.is_finite() {
        return Err(Error::NonFiniteLoss { cls, noisy });
    }
    Ok(cls + lambda * noisy)
}

/// Evaluates the training objective for one preprocessed volume and, when
/// `grads` is given, accumulates dL/dθ into it.
///
/// Dropout masks on the embedding are drawn from `dropout_seed` and the slice
/// index, so a fixed seed gives a fixed (differentiable) function of θ.
pub fn patient_objective(
    model: &Model,
    slices: &[Array2<f64>],
    label: u8,
    settings: &ObjectiveSettings,
    dropout_seed: u64,
    mut grads: Option<&mut ModelGrads>,
) -> Result<LossParts> {
    if slices.is_empty() {
        return Err(Error::EmptyVolume);
    }
    let y = one_hot(label);
    let want_grads = grads.is_some();

    let mut tapes = Vec::with_capacity(slices.len());
    let mut features = Vec::with_capacity(slices.len());
    let mut scores = Vec::with_capacity(slices.len());
    for (i, s) in slices.iter().enumerate() {
        let (f, tape) = if want_grads {
            let (f, t) = model.backbone.forward_taped(s.view())?;
            (f, Some(t))
        } else {
            (model.backbone.forward(s.view())?, None)
        };
        let fm = FeatureMaps::new(f, i)?;
        let maps = class_maps(&fm, &model.head)?;
        let mut sc = [0.0; NUM_CLASSES];
        for (v, m) in sc.iter_mut().zip(maps.outer_iter()) {
            *v = m.mean().expect("non-empty");
        }
        scores.push(sc);
        features.push(fm);
        tapes.push(tape);
    }

    let n = slices.len();
    let mut d_scores = vec![[0.0; NUM_CLASSES]; n];
    let mut d_pooled: Option<Vec<Array1<f64>>> = None;
    let mut parts = LossParts::default();

    match settings.mode {
        TrainingMode::SliceLabels => {
            let pass = NoisyPass::forward(&scores, None)?;
            parts.total = pass.loss(&y)?;
            if want_grads {
                d_scores = pass.backward(&y, None)?.d_scores;
            }
        }
        TrainingMode::Mil => {
            if settings.enable_cls_loss {
                let sam = SamPass::forward(&scores, settings.section_len, settings.k)?;
                parts.cls = sam.loss(&y)?;
                if want_grads {
                    for (d, g) in d_scores.iter_mut().zip(sam.backward(&y, n)?) {
                        d[0] += g[0];
                        d[1] += g[1];
                    }
                }
            }
            if settings.enable_noisy_loss {
                let masks = (0..n)
                    .map(|i| dropout_mask(model.feature_channels(), settings.dropout_rate, derive_seed(&[dropout_seed, i as u64])))
                    .collect::<Result<Vec<_>>>()?;
                let embeddings: Vec<Array1<f64>> = features
                    .iter()
                    .zip(&masks)
                    .map(|(f, m)| f.pooled() * m)
                    .collect();
                let pass = NoisyPass::forward(&scores, Some((&embeddings, &model.noise)))?;
                parts.noisy = pass.loss(&y)?;
                if let Some(g) = grads.as_deref_mut() {
                    if settings.lambda != 0.0 {
                        let ng = pass.backward(&y, Some((&embeddings, &model.noise)))?;
                        let lam = settings.lambda;
                        for (d, s) in d_scores.iter_mut().zip(&ng.d_scores) {
                            d[0] += lam * s[0];
                            d[1] += lam * s[1];
                        }
                        g.noise_weights.scaled_add(lam, &ng.d_weights);
                        g.noise_biases.scaled_add(lam, &ng.d_biases);
                        d_pooled = Some(
                            ng.d_embeddings
                                .into_iter()
                                .zip(&masks)
                                .map(|(de, m)| de * m * lam)
                                .collect(),
                        );
                    }
                }
            }
            parts.total = total_loss(
                parts.cls,
                parts.noisy,
                settings.lambda,
                settings.enable_cls_loss,
                settings.enable_noisy_loss,
            )?;
        }
    }

    if let Some(g) = grads {
        for i in 0..n {
            let (mut d_planes, d_head) = class_scores_backward(&features[i], &model.head, &d_scores[i])?;
            g.head += &d_head;
            if let Some(dp) = &d_pooled {
                let (_, h, w) = d_planes.dim();
                let inv = 1.0 / (h * w) as f64;
                for (mut plane, &v) in d_planes.outer_iter_mut().zip(dp[i].iter()) {
                    plane += v * inv;
                }
            }
            let tape = tapes[i].as_ref().expect("taped forward");
            model.backbone.backward(tape, &d_planes, &mut g.backbone);
        }
    }
    Ok(parts)
}
