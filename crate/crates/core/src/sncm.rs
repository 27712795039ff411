//! Slice-level label-noise correction.
//!
//! Every slice inherits its patient's label, which is wrong for lesion-free
//! slices of positive patients. For each class `c` the observed (noisy) label
//! `z_c` is modelled through a per-slice transition matrix
//!
//! ```text
//! Q^c_ij = P(z_c = i | y_c = j, I) = softmax_i(w^c_ij · φ(I) + b^c_ij)
//! P(z_c = i | I) = Σ_j Q^c_ij P(y_c = j | I),   P(y_c = 1 | I) = σ(s_c)
//! ```
//!
//! `Q^c` is normalised over `i`, i.e. each column is a distribution.

use ndarray::{Array1, Array3, Array4};

use crate::model::{Embedding, SliceClassScores};
use crate::sam::{validate_one_hot, PROB_EPS};
use crate::{sigmoid, Error, Result, NUM_CLASSES};

/// Affine transition parameters, `weights[[c, i, j, ..]]` and `biases[[c, i, j]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseParams {
    pub weights: Array4<f64>,
    pub biases: Array3<f64>,
}

/// Diagonal bias used by [`NoiseParams::near_identity`]; `softmax([2, 0]) ≈ [0.88, 0.12]`.
pub const IDENTITY_BIAS: f64 = 2.0;

impl NoiseParams {
    /// All-zero parameters: every `Q` is uniform.
    pub fn zeros(channels: usize) -> Self {
        Self {
            weights: Array4::zeros((NUM_CLASSES, 2, 2, channels)),
            biases: Array3::zeros((NUM_CLASSES, 2, 2)),
        }
    }

    /// Zero weights and `b_ii = 2`, `b_ij = 0` (i ≠ j), so `Q` starts close to
    /// the identity ("labels are clean").
    pub fn near_identity(channels: usize) -> Self {
        let mut p = Self::zeros(channels);
        for c in 0..NUM_CLASSES {
            for i in 0..2 {
                p.biases[[c, i, i]] = IDENTITY_BIAS;
            }
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.weights.dim().3
    }

    pub fn validate(&self) -> Result<()> {
        let (c, i, j, _) = self.weights.dim();
        if (c, i, j) != (NUM_CLASSES, 2, 2) || self.biases.dim() != (NUM_CLASSES, 2, 2) {
            return Err(Error::shape("noise parameters must be C×2×2(×K)"));
        }
        if self.weights.iter().chain(self.biases.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite noise parameter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMatrix {
    pub class_index: usize,
    /// `q[i][j] = P(z = i | y = j)`.
    pub q: [[f64; 2]; 2],
    /// Transition scores `T_ij = w_ij · φ + b_ij`.
    pub scores: [[f64; 2]; 2],
}

impl TransitionMatrix {
    pub fn identity(class_index: usize) -> Self {
        Self {
            class_index,
            q: [[1.0, 0.0], [0.0, 1.0]],
            scores: [[f64::INFINITY, f64::NEG_INFINITY], [f64::NEG_INFINITY, f64::INFINITY]],
        }
    }

    fn from_scores(class_index: usize, scores: [[f64; 2]; 2]) -> Self {
        let mut q = [[0.0; 2]; 2];
        for j in 0..2 {
            let m = scores[0][j].max(scores[1][j]);
            let e0 = (scores[0][j] - m).exp();
            let e1 = (scores[1][j] - m).exp();
            q[0][j] = e0 / (e0 + e1);
            q[1][j] = e1 / (e0 + e1);
        }
        Self {
            class_index,
            q,
            scores,
        }
    }
}

/// `P(y_c = 1 | I)` for each class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruePosterior(pub [f64; NUM_CLASSES]);

impl TruePosterior {
    pub fn from_scores(scores: &SliceClassScores) -> Self {
        TruePosterior([sigmoid(scores.get(0)), sigmoid(scores.get(1))])
    }
}

fn transition_scores(e: &[f64], params: &NoiseParams, c: usize) -> [[f64; 2]; 2] {
    let mut t = [[0.0; 2]; 2];
    for (i, row) in t.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let w = params.weights.slice(ndarray::s![c, i, j, ..]);
            *v = w.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + params.biases[[c, i, j]];
        }
    }
    t
}

pub fn transition_matrix(e: &Embedding, params: &NoiseParams, class_index: usize) -> Result<TransitionMatrix> {
    if class_index >= NUM_CLASSES {
        return Err(Error::ClassIndex {
            index: class_index,
            classes: NUM_CLASSES,
        });
    }
    params.validate()?;
    if e.len() != params.channels() {
        return Err(Error::shape(format!(
            "embedding has {} entries, noise parameters expect {}",
            e.len(),
            params.channels()
        )));
    }
    let e = e.0.as_standard_layout();
    let scores = transition_scores(e.as_slice().expect("standard layout"), params, class_index);
    Ok(TransitionMatrix::from_scores(class_index, scores))
}

/// `[P(z = 0 | I), P(z = 1 | I)]` for `q.class_index`.
pub fn noisy_posterior(q: &TransitionMatrix, p: &TruePosterior) -> [f64; 2] {
    let p1 = p.0[q.class_index];
    let py = [1.0 - p1, p1];
    [
        q.q[0][0] * py[0] + q.q[0][1] * py[1],
        q.q[1][0] * py[0] + q.q[1][1] * py[1],
    ]
}

/// Mean over slices of `−Σ_c [y_c log P(z_c = 1) + (1 − y_c) log P(z_c = 0)]`.
///
/// `posteriors[n][c]` is `[P(z_c = 0), P(z_c = 1)]` for slice `n`.
pub fn noisy_loss(posteriors: &[[[f64; 2]; NUM_CLASSES]], y: &[f64]) -> Result<f64> {
    validate_one_hot(y)?;
    if posteriors.is_empty() {
        return Err(Error::EmptyVolume);
    }
    let total: f64 = posteriors
        .iter()
        .map(|slice| {
            (0..NUM_CLASSES)
                .map(|c| {
                    let z1 = slice[c][1].clamp(PROB_EPS, 1.0 - PROB_EPS);
                    let z0 = slice[c][0].clamp(PROB_EPS, 1.0 - PROB_EPS);
                    -(y[c] * z1.ln() + (1.0 - y[c]) * z0.ln())
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / posteriors.len() as f64)
}

/// Forward state of the noisy loss for one patient.
#[derive(Debug, Clone)]
pub struct NoisyPass {
    transitions: Vec<[TransitionMatrix; NUM_CLASSES]>,
    posteriors: Vec<[f64; NUM_CLASSES]>,
    noisy: Vec<[[f64; 2]; NUM_CLASSES]>,
}

#[derive(Debug, Clone)]
pub struct NoisyGrads {
    pub d_scores: Vec<[f64; NUM_CLASSES]>,
    pub d_embeddings: Vec<Array1<f64>>,
    pub d_weights: Array4<f64>,
    pub d_biases: Array3<f64>,
}

impl NoisyPass {
    /// `transitions = None` freezes `Q` at the identity, which reduces the loss
    /// to per-slice cross-entropy against the broadcast patient label.
    pub fn forward(
        scores: &[[f64; NUM_CLASSES]],
        embeddings: Option<(&[Array1<f64>], &NoiseParams)>,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyVolume);
        }
        let mut transitions = Vec::with_capacity(scores.len());
        match embeddings {
            Some((emb, params)) => {
                if emb.len() != scores.len() {
                    return Err(Error::shape("one embedding per slice is required"));
                }
                params.validate()?;
                for e in emb {
                    if e.len() != params.channels() {
                        return Err(Error::shape("embedding length does not match noise parameters"));
                    }
                    let e = e.as_standard_layout();
                    let e = e.as_slice().expect("standard layout");
                    transitions.push([
                        TransitionMatrix::from_scores(0, transition_scores(e, params, 0)),
                        TransitionMatrix::from_scores(1, transition_scores(e, params, 1)),
                    ]);
                }
            }
            None => transitions.resize(scores.len(), [TransitionMatrix::identity(0), TransitionMatrix::identity(1)]),
        }
        let posteriors: Vec<[f64; NUM_CLASSES]> = scores.iter().map(|s| [sigmoid(s[0]), sigmoid(s[1])]).collect();
        let noisy = transitions
            .iter()
            .zip(&posteriors)
            .map(|(q, p)| {
                let tp = TruePosterior(*p);
                [noisy_posterior(&q[0], &tp), noisy_posterior(&q[1], &tp)]
            })
            .collect();
        Ok(Self {
            transitions,
            posteriors,
            noisy,
        })
    }

    pub fn transitions(&self) -> &[[TransitionMatrix; NUM_CLASSES]] {
        &self.transitions
    }

    pub fn noisy_posteriors(&self) -> &[[[f64; 2]; NUM_CLASSES]] {
        &self.noisy
    }

    pub fn loss(&self, y: &[f64]) -> Result<f64> {
        noisy_loss(&self.noisy, y)
    }

    /// Gradients of [`NoisyPass::loss`]. `embeddings` and `params` must be the
    /// ones given to `forward` (ignored when `Q` was frozen).
    pub fn backward(
        &self,
        y: &[f64],
        embeddings: Option<(&[Array1<f64>], &NoiseParams)>,
    ) -> Result<NoisyGrads> {
        validate_one_hot(y)?;
        let n = self.noisy.len();
        let channels = embeddings.map_or(0, |(_, p)| p.channels());
        let mut grads = NoisyGrads {
            d_scores: vec![[0.0; NUM_CLASSES]; n],
            d_embeddings: vec![Array1::zeros(channels); n],
            d_weights: Array4::zeros((NUM_CLASSES, 2, 2, channels)),
            d_biases: Array3::zeros((NUM_CLASSES, 2, 2)),
        };
        let inv_n = 1.0 / n as f64;
        for s in 0..n {
            for c in 0..NUM_CLASSES {
                let z = self.noisy[s][c];
                let q = &self.transitions[s][c].q;
                // dL/dz_i with the clamp's zero gradient outside [ε, 1 − ε]
                let dz = |zi: f64, target: f64| {
                    if zi <= PROB_EPS || zi >= 1.0 - PROB_EPS {
                        0.0
                    } else {
                        -target / zi * inv_n
                    }
                };
                let d_z = [dz(z[0], 1.0 - y[c]), dz(z[1], y[c])];
                let p1 = self.posteriors[s][c];
                let py = [1.0 - p1, p1];
                let sig_prime = p1 * (1.0 - p1);
                let d_p1 = d_z[0] * (q[0][1] - q[0][0]) + d_z[1] * (q[1][1] - q[1][0]);
                grads.d_scores[s][c] = d_p1 * sig_prime;

                if let Some((emb, params)) = embeddings {
                    let e = &emb[s];
                    for j in 0..2 {
                        // softmax over i in column j
                        let d_q = [d_z[0] * py[j], d_z[1] * py[j]];
                        let dot = q[0][j] * d_q[0] + q[1][j] * d_q[1];
                        for i in 0..2 {
                            let d_t = q[i][j] * (d_q[i] - dot);
                            grads.d_biases[[c, i, j]] += d_t;
                            let w = params.weights.slice(ndarray::s![c, i, j, ..]);
                            grads.d_embeddings[s].scaled_add(d_t, &w);
                            let mut dw = grads.d_weights.slice_mut(ndarray::s![c, i, j, ..]);
                            dw.scaled_add(d_t, e);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_uniform_q() {
        let q = transition_matrix(&Embedding(Array1::ones(3)), &NoiseParams::zeros(3), 0).unwrap();
        assert!(q.q.iter().flatten().all(|&v| v == 0.5));
    }

    #[test]
    fn column_softmax_example() {
        let mut p = NoiseParams::zeros(1);
        p.biases[[1, 0, 0]] = 2.0;
        let q = transition_matrix(&Embedding(Array1::zeros(1)), &p, 1).unwrap();
        assert!((q.q[0][0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((q.q[1][0] - 0.119_202_922_022_117_6).abs() < 1e-12);
        assert_eq!(q.scores[0][0], 2.0);
    }

    #[test]
    fn transition_errors() {
        let p = NoiseParams::zeros(3);
        assert!(matches!(transition_matrix(&Embedding(Array1::zeros(2)), &p, 0), Err(Error::Shape(_))));
        assert!(matches!(
            transition_matrix(&Embedding(Array1::zeros(3)), &p, 5),
            Err(Error::ClassIndex { .. })
        ));
    }

    #[test]
    fn noisy_posterior_examples() {
        let p = TruePosterior([0.3, 0.8]);
        let id = TransitionMatrix::identity(1);
        assert_eq!(noisy_posterior(&id, &p), [1.0 - 0.8, 0.8]);
        let uniform = TransitionMatrix {
            class_index: 1,
            q: [[0.5, 0.5], [0.5, 0.5]],
            scores: [[0.0; 2]; 2],
        };
        assert_eq!(noisy_posterior(&uniform, &p), [0.5, 0.5]);
        let q = TransitionMatrix {
            class_index: 0,
            q: [[0.9, 0.2], [0.1, 0.8]],
            scores: [[0.0; 2]; 2],
        };
        let z = noisy_posterior(&q, &TruePosterior([1.0, 0.0]));
        assert!((z[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn noisy_loss_examples() {
        let perfect = [[[1.0, 0.0], [0.0, 1.0]]];
        assert!(noisy_loss(&perfect, &[0.0, 1.0]).unwrap() < 1e-6);
        let half = [[[0.5, 0.5], [0.5, 0.5]]];
        assert!((noisy_loss(&half, &[0.0, 1.0]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let slices = [[[0.3, 0.7], [0.6, 0.4]], [[0.9, 0.1], [0.2, 0.8]]];
        let doubled: Vec<_> = slices.iter().chain(slices.iter()).cloned().collect();
        let a = noisy_loss(&slices, &[1.0, 0.0]).unwrap();
        let b = noisy_loss(&doubled, &[1.0, 0.0]).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(noisy_loss(&[], &[1.0, 0.0]).is_err());
        assert!(noisy_loss(&half, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn frozen_identity_is_per_slice_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<[f64; 2]> = (0..7).map(|_| [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)]).collect();
        let y = [0.0, 1.0];
        let pass = NoisyPass::forward(&scores, None).unwrap();
        let oracle: f64 = scores
            .iter()
            .map(|s| -((1.0 - sigmoid(s[0])).ln() + sigmoid(s[1]).ln()))
            .sum::<f64>()
            / scores.len() as f64;
        assert!((pass.loss(&y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn columns_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let k = rng.gen_range(1..6);
            let mut p = NoiseParams::zeros(k);
            p.weights.mapv_inplace(|_| rng.gen_range(-5.0..5.0));
            p.biases.mapv_inplace(|_| rng.gen_range(-5.0..5.0));
            let e = Embedding(Array1::from_shape_simple_fn(k, || rng.gen_range(-3.0..3.0)));
            for c in 0..2 {
                let q = transition_matrix(&e, &p, c).unwrap();
                for j in 0..2 {
                    assert!((q.q[0][j] + q.q[1][j] - 1.0).abs() < 1e-12);
                }
                let z = noisy_posterior(&q, &TruePosterior([rng.gen(), rng.gen()]));
                assert!((z[0] + z[1] - 1.0).abs() < 1e-12);
            }
        }
    }
}
