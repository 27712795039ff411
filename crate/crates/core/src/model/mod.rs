//! Backbone features, the bias-free 1×1 classifier head and class activation maps.
//!
//! A 1×1 convolution with kernel `W ∈ R^{K×C}` followed by global average
//! pooling yields the same class scores as pooling first and applying `W` as a
//! fully connected layer. The per-class map produced by the convolution is the
//! class activation map, so CAMs come out of the ordinary forward pass and
//! `mean(A_c) == s_c` holds exactly (up to rounding).

mod backbone;
mod network;

pub use backbone::{Backbone, BackboneArch, BackboneGrads, BackboneTape, ConvSpec, DEFAULT_BACKBONE, DESK_BACKBONE};
pub use network::{transitions_array, Model, ModelGrads, SliceOutput, VolumeOutput};

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, NUM_CLASSES};

/// The K feature planes of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    planes: Array3<f64>,
    pub slice_index: usize,
}

impl FeatureMaps {
    pub fn new(planes: Array3<f64>, slice_index: usize) -> Result<Self> {
        let (k, h, w) = planes.dim();
        if k == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("feature maps must be non-empty, got {k}×{h}×{w}")));
        }
        if planes.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature activation"));
        }
        Ok(Self {
            planes: planes.as_standard_layout().into_owned(),
            slice_index,
        })
    }

    pub fn planes(&self) -> &Array3<f64> {
        &self.planes
    }

    pub fn channels(&self) -> usize {
        self.planes.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.planes.dim();
        (h, w)
    }

    /// Global average pool: one mean per plane.
    pub fn pooled(&self) -> Array1<f64> {
        let (k, h, w) = self.planes.dim();
        self.planes
            .view()
            .into_shape_with_order((k, h * w))
            .expect("standard layout")
            .mean_axis(Axis(1))
            .expect("non-empty planes")
    }

    fn flat(&self) -> ArrayView2<'_, f64> {
        let (k, h, w) = self.planes.dim();
        self.planes
            .view()
            .into_shape_with_order((k, h * w))
            .expect("standard layout")
    }
}

/// Bias-free 1×1 convolution kernel, `K × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Array2<f64>,
}

impl ClassifierHead {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        let (k, c) = weights.dim();
        if k == 0 || c != NUM_CLASSES {
            return Err(Error::shape(format!(
                "head must be K×{NUM_CLASSES} with K ≥ 1, got {k}×{c}"
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite head weight"));
        }
        Ok(Self { weights })
    }

    /// Xavier-uniform, bound `sqrt(6 / (K + C))`.
    pub fn xavier<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (channels + NUM_CLASSES) as f64).sqrt();
        Self {
            weights: Array2::from_shape_simple_fn((channels, NUM_CLASSES), || {
                rng.gen_range(-bound..bound)
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.weights.dim().0
    }
}

/// Raw per-class scores `s_c` of one slice, before the sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceClassScores(pub Vec<f64>);

impl SliceClassScores {
    pub fn get(&self, class_index: usize) -> f64 {
        self.0[class_index]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub class_index: usize,
    pub map: Array2<f64>,
}

impl ActivationMap {
    pub fn mean(&self) -> f64 {
        self.map.mean().unwrap_or(0.0)
    }
}

/// Pooled (and possibly dropped-out) feature vector φ(I) of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Array1<f64>);

impl Embedding {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Runs the backbone on one preprocessed slice.
pub fn forward_features(slice: ArrayView2<f64>, backbone: &Backbone, slice_index: usize) -> Result<FeatureMaps> {
    FeatureMaps::new(backbone.forward(slice)?, slice_index)
}

fn check_head(fm: &FeatureMaps, weights: &Array2<f64>) -> Result<()> {
    if weights.dim().0 != fm.channels() {
        return Err(Error::shape(format!(
            "weights have {} rows but there are {} feature planes",
            weights.dim().0,
            fm.channels()
        )));
    }
    Ok(())
}

/// Per-class maps `A_c = Σ_k W_{k,c} F^k` for every class, shape `(C, H, W)`.
pub fn class_maps(fm: &FeatureMaps, head: &ClassifierHead) -> Result<Array3<f64>> {
    check_head(fm, &head.weights)?;
    let (h, w) = fm.spatial();
    let c = head.weights.dim().1;
    Ok(head
        .weights
        .t()
        .dot(&fm.flat())
        .into_shape_with_order((c, h, w))
        .expect("standard layout"))
}

/// 1×1 convolution, then global average pooling.
pub fn class_scores(fm: &FeatureMaps, head: &ClassifierHead) -> Result<SliceClassScores> {
    let maps = class_maps(fm, head)?;
    Ok(SliceClassScores(
        maps.outer_iter().map(|m| m.mean().expect("non-empty")).collect(),
    ))
}

/// Global average pooling, then a fully connected layer with the given `K × C` weights.
pub fn fc_class_scores(fm: &FeatureMaps, fc_weights: &Array2<f64>) -> Result<SliceClassScores> {
    check_head(fm, fc_weights)?;
    let pooled = fm.pooled();
    Ok(SliceClassScores(fc_weights.t().dot(&pooled).to_vec()))
}

/// Gradients of `Σ_c d_scores[c] · s_c` with respect to the feature planes and
/// the head weights.
pub fn class_scores_backward(
    fm: &FeatureMaps,
    head: &ClassifierHead,
    d_scores: &[f64],
) -> Result<(Array3<f64>, Array2<f64>)> {
    check_head(fm, &head.weights)?;
    if d_scores.len() != head.weights.dim().1 {
        return Err(Error::shape("score gradient length must equal class count"));
    }
    let (k, h, w) = fm.planes.dim();
    let n = (h * w) as f64;
    let ds = Array1::from(d_scores.to_vec());
    let per_plane = head.weights.dot(&ds) / n;
    let mut d_planes = Array3::zeros((k, h, w));
    for (mut plane, g) in d_planes.outer_iter_mut().zip(per_plane.iter()) {
        plane.fill(*g);
    }
    let pooled = fm.pooled();
    let d_weights = Array2::from_shape_fn(head.weights.dim(), |(kk, c)| pooled[kk] * ds[c]);
    Ok((d_planes, d_weights))
}

pub fn activation_map(fm: &FeatureMaps, head: &ClassifierHead, class_index: usize) -> Result<ActivationMap> {
    let classes = head.weights.dim().1;
    if class_index >= classes {
        return Err(Error::ClassIndex {
            index: class_index,
            classes,
        });
    }
    let maps = class_maps(fm, head)?;
    Ok(ActivationMap {
        class_index,
        map: maps.index_axis(Axis(0), class_index).to_owned(),
    })
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`. Deterministic in `seed`.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Result<Array1<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(Array1::ones(len));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    Ok(Array1::from_shape_simple_fn(len, || {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

/// φ(I): global average pool of the feature planes followed by dropout.
///
/// Dropout is inverted (kept activations are scaled by `1 / (1 - rate)` during
/// training), so evaluation uses the plain pooled features with no rescaling.
pub fn embed(fm: &FeatureMaps, dropout_rate: f64, training: bool, seed: u64) -> Result<Embedding> {
    let pooled = fm.pooled();
    let mask = dropout_mask(pooled.len(), dropout_rate, seed)?;
    if !training {
        return Ok(Embedding(pooled));
    }
    Ok(Embedding(pooled * mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::{prop_assert, proptest};

    fn ones_fm() -> FeatureMaps {
        FeatureMaps::new(Array3::ones((2, 2, 2)), 0).unwrap()
    }

    #[test]
    fn conv_and_fc_scores_match_hand_sum() {
        let head = ClassifierHead::new(array![[2.0, 0.0], [3.0, 0.0]]).unwrap();
        let s = class_scores(&ones_fm(), &head).unwrap();
        assert_eq!(s.get(0), 5.0);
        assert_eq!(s.get(1), 0.0);
        let fc = fc_class_scores(&ones_fm(), &head.weights).unwrap();
        assert_eq!(fc.get(0), 5.0);
    }

    #[test]
    fn fc_scalar_product() {
        let fm = FeatureMaps::new(array![[[1.0, 2.0], [1.0, 2.0]]], 0).unwrap();
        let s = fc_class_scores(&fm, &array![[2.0]]).unwrap();
        assert_eq!(s.0, vec![3.0]);
        let zero = FeatureMaps::new(Array3::zeros((3, 2, 2)), 0).unwrap();
        let s = fc_class_scores(&zero, &Array2::ones((3, 2))).unwrap();
        assert_eq!(s.0, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_head_gives_zero_scores() {
        let head = ClassifierHead::new(Array2::zeros((2, 2))).unwrap();
        assert_eq!(class_scores(&ones_fm(), &head).unwrap().0, vec![0.0, 0.0]);
        let a = activation_map(&ones_fm(), &head, 1).unwrap();
        assert!(a.map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weight_cam_reproduces_plane() {
        let plane = array![[[0.5, -1.0, 2.0], [3.0, 0.0, 1.5]]];
        let fm = FeatureMaps::new(plane.clone(), 4).unwrap();
        let head = ClassifierHead::new(array![[0.0, 1.0]]).unwrap();
        let a = activation_map(&fm, &head, 1).unwrap();
        assert_eq!(a.map, plane.index_axis(Axis(0), 0));
    }

    #[test]
    fn shape_errors() {
        let head = ClassifierHead::new(Array2::zeros((3, 2))).unwrap();
        assert!(matches!(class_scores(&ones_fm(), &head), Err(Error::Shape(_))));
        assert!(matches!(fc_class_scores(&ones_fm(), &Array2::zeros((5, 2))), Err(Error::Shape(_))));
        let head = ClassifierHead::new(Array2::zeros((2, 2))).unwrap();
        assert!(matches!(
            activation_map(&ones_fm(), &head, 2),
            Err(Error::ClassIndex { index: 2, classes: 2 })
        ));
        assert!(ClassifierHead::new(Array2::zeros((2, 3))).is_err());
        assert!(FeatureMaps::new(Array3::zeros((0, 2, 2)), 0).is_err());
        assert!(FeatureMaps::new(Array3::from_elem((1, 1, 1), f64::NAN), 0).is_err());
    }

    #[test]
    fn embedding_eval_is_plain_pooling() {
        let fm = FeatureMaps::new(array![[[1.0, 3.0]], [[2.0, 2.0]], [[0.0, -4.0]]], 0).unwrap();
        let e = embed(&fm, 0.7, false, 9).unwrap();
        assert_eq!(e.0, array![2.0, 2.0, -2.0]);
        let no_drop = embed(&fm, 0.0, true, 9).unwrap();
        assert_eq!(no_drop, e);
        let a = embed(&fm, 0.7, true, 11).unwrap();
        let b = embed(&fm, 0.7, true, 11).unwrap();
        assert_eq!(a, b);
        assert!(embed(&fm, 1.0, true, 0).is_err());
        for (x, p) in a.0.iter().zip(e.0.iter()) {
            assert!(*x == 0.0 || (x - p / 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn xavier_head_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ClassifierHead::xavier(64, &mut rng);
        let bound = (6.0f64 / 66.0).sqrt();
        assert!(head.weights.iter().all(|w| w.abs() <= bound));
    }

    proptest! {
        #[test]
        fn cam_is_linear_in_weights(seed in 0u64..500, alpha in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fm = FeatureMaps::new(Array3::from_shape_simple_fn((3, 4, 5), || rng.gen_range(-2.0..2.0)), 0).unwrap();
            let head = ClassifierHead::new(Array2::from_shape_simple_fn((3, 2), || rng.gen_range(-2.0..2.0))).unwrap();
            let scaled = ClassifierHead::new(&head.weights * alpha).unwrap();
            for c in 0..2 {
                let a = activation_map(&fm, &head, c).unwrap();
                let b = activation_map(&fm, &scaled, c).unwrap();
                for (x, y) in a.map.iter().zip(b.map.iter()) {
                    prop_assert!((alpha * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }
        }
    }
}
