use ndarray::{Array1, Array2, Array3, Array4, ArrayD, ArrayView2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{class_maps, Backbone, BackboneArch, BackboneGrads, ClassifierHead, FeatureMaps};
use crate::archive::ArrayArchive;
use crate::sam::{PatientProbability, SamPass};
use crate::sncm::{transition_matrix, NoiseParams, TransitionMatrix};
use crate::{Error, Result, NUM_CLASSES};

/// All trainable parameters: backbone, 1×1 head and noise-transition parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: ClassifierHead,
    pub noise: NoiseParams,
}

/// Gradient buffers with the same layout as [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub backbone: BackboneGrads,
    pub head: Array2<f64>,
    pub noise_weights: Array4<f64>,
    pub noise_biases: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct SliceOutput {
    pub features: FeatureMaps,
    pub scores: [f64; NUM_CLASSES],
    /// Class activation maps, `(C, h, w)`, from the same pass as `scores`.
    pub maps: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct VolumeOutput {
    pub slices: Vec<SliceOutput>,
    pub sam: SamPass,
    pub patient: PatientProbability,
    /// Per-slice transition matrices computed from the undropped embedding.
    pub transitions: Vec<[TransitionMatrix; NUM_CLASSES]>,
}

impl VolumeOutput {
    pub fn slice_scores(&self) -> Vec<[f64; NUM_CLASSES]> {
        self.slices.iter().map(|s| s.scores).collect()
    }
}

impl Model {
    /// Xavier-initialised backbone and head; noise parameters start near the identity.
    pub fn init(arch: BackboneArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::xavier(arch, &mut rng);
        let k = backbone.feature_channels();
        let head = ClassifierHead::xavier(k, &mut rng);
        Self {
            backbone,
            head,
            noise: NoiseParams::near_identity(k),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.feature_channels()
    }

    pub fn slice_forward(&self, slice: ArrayView2<f64>, index: usize) -> Result<SliceOutput> {
        let features = FeatureMaps::new(self.backbone.forward(slice)?, index)?;
        let maps = class_maps(&features, &self.head)?;
        let mut scores = [0.0; NUM_CLASSES];
        for (s, m) in scores.iter_mut().zip(maps.outer_iter()) {
            *s = m.mean().expect("non-empty map");
        }
        Ok(SliceOutput {
            features,
            scores,
            maps,
        })
    }

    /// Inference over a preprocessed volume.
    pub fn predict_volume(&self, slices: &[Array2<f64>], section_len: usize, k: usize) -> Result<VolumeOutput> {
        if slices.is_empty() {
            return Err(Error::EmptyVolume);
        }
        let outputs = slices
            .iter()
            .enumerate()
            .map(|(i, s)| self.slice_forward(s.view(), i))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<_> = outputs.iter().map(|o| o.scores).collect();
        let sam = SamPass::forward(&scores, section_len, k)?;
        let patient = sam.patient_probability();
        let transitions = outputs
            .iter()
            .map(|o| {
                let e = crate::model::Embedding(o.features.pooled());
                Ok([
                    transition_matrix(&e, &self.noise, 0)?,
                    transition_matrix(&e, &self.noise, 1)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VolumeOutput {
            slices: outputs,
            sam,
            patient,
            transitions,
        })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            backbone: self.backbone.zeros_like(),
            head: Array2::zeros(self.head.weights.dim()),
            noise_weights: Array4::zeros(self.noise.weights.dim()),
            noise_biases: Array3::zeros(self.noise.biases.dim()),
        }
    }

    /// Visits every parameter tensor in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        for (l, (w, b)) in self.backbone.weights.iter().zip(&self.backbone.biases).enumerate() {
            f(&format!("backbone.{l}"), w.as_slice().expect("standard layout"));
            f(&format!("backbone.{l}.bias"), b.as_slice().expect("standard layout"));
        }
        f("head", self.head.weights.as_slice().expect("standard layout"));
        f("noise.weights", self.noise.weights.as_slice().expect("standard layout"));
        f("noise.biases", self.noise.biases.as_slice().expect("standard layout"));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (l, (w, b)) in self.backbone.weights.iter_mut().zip(&mut self.backbone.biases).enumerate() {
            f(&format!("backbone.{l}"), w.as_slice_mut().expect("standard layout"));
            f(&format!("backbone.{l}.bias"), b.as_slice_mut().expect("standard layout"));
        }
        f("head", self.head.weights.as_slice_mut().expect("standard layout"));
        f("noise.weights", self.noise.weights.as_slice_mut().expect("standard layout"));
        f("noise.biases", self.noise.biases.as_slice_mut().expect("standard layout"));
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(|_, p| n += p.len());
        n
    }

    /// Stores parameters as `param/<name>` arrays plus the backbone id.
    pub fn write_archive(&self, archive: &mut ArrayArchive) {
        archive.set_meta("backbone", self.backbone.arch.id.clone());
        let mut put = |name: &str, a: ArrayD<f64>| archive.insert(format!("param/{name}"), a);
        for (l, (w, b)) in self.backbone.weights.iter().zip(&self.backbone.biases).enumerate() {
            put(&format!("backbone.{l}"), w.clone().into_dyn());
            put(&format!("backbone.{l}.bias"), b.clone().into_dyn());
        }
        put("head", self.head.weights.clone().into_dyn());
        put("noise.weights", self.noise.weights.clone().into_dyn());
        put("noise.biases", self.noise.biases.clone().into_dyn());
    }

    pub fn read_archive(archive: &ArrayArchive) -> Result<Self> {
        let arch = BackboneArch::from_id(archive.meta("backbone")?)?;
        let mut model = Model::init(arch, 0);
        let mut failure = None;
        model.visit_mut(|name, dst| {
            let key = format!("param/{name}");
            match archive.array(&key) {
                Ok(src) if src.len() == dst.len() => {
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d = *s;
                    }
                }
                Ok(src) => {
                    failure.get_or_insert(Error::Archive(format!(
                        "`{key}` has {} values, expected {}",
                        src.len(),
                        dst.len()
                    )));
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }
}

impl ModelGrads {
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        for (l, (w, b)) in self.backbone.weights.iter().zip(&self.backbone.biases).enumerate() {
            f(&format!("backbone.{l}"), w.as_slice().expect("standard layout"));
            f(&format!("backbone.{l}.bias"), b.as_slice().expect("standard layout"));
        }
        f("head", self.head.as_slice().expect("standard layout"));
        f("noise.weights", self.noise_weights.as_slice().expect("standard layout"));
        f("noise.biases", self.noise_biases.as_slice().expect("standard layout"));
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.backbone.weights.iter_mut().zip(&other.backbone.weights) {
            *a += b;
        }
        for (a, b) in self.backbone.biases.iter_mut().zip(&other.backbone.biases) {
            *a += b;
        }
        self.head += &other.head;
        self.noise_weights += &other.noise_weights;
        self.noise_biases += &other.noise_biases;
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.backbone.weights {
            *a *= factor;
        }
        for a in &mut self.backbone.biases {
            *a *= factor;
        }
        self.head *= factor;
        self.noise_weights *= factor;
        self.noise_biases *= factor;
    }

    /// Flattened copy in visiting order.
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Vec::new();
        self.visit(|_, g| out.extend_from_slice(g));
        Array1::from(out)
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, g| ok &= g.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Array helper used by diagnostics dumps: per-slice `Q` as `(n, C, 2, 2)`.
pub fn transitions_array(transitions: &[[TransitionMatrix; NUM_CLASSES]]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[transitions.len(), NUM_CLASSES, 2, 2]), |ix| {
        transitions[ix[0]][ix[1]].q[ix[2]][ix[3]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_preserves_predictions() {
        let model = Model::init(BackboneArch::from_id("tiny-test").unwrap(), 4);
        let mut a = ArrayArchive::new();
        model.write_archive(&mut a);
        let back = Model::read_archive(&ArrayArchive::from_bytes(&a.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn volume_prediction_is_consistent_with_sam() {
        let model = Model::init(BackboneArch::from_id("tiny-test").unwrap(), 1);
        let slices: Vec<Array2<f64>> = (0..5)
            .map(|i| Array2::from_shape_fn((8, 8), |(r, c)| ((r * c + i) as f64 * 0.37).sin()))
            .collect();
        let out = model.predict_volume(&slices, 2, 1).unwrap();
        assert_eq!(out.sam.partition.len(), 2);
        let maxes: Vec<f64> = out.sam.partition.ranges().iter()
            .map(|r| out.slices[r.clone()].iter().map(|s| s.scores[1]).fold(f64::MIN, f64::max))
            .collect();
        for (l, m) in out.sam.logits.iter().zip(maxes) {
            assert_eq!(l[1], m);
        }
        assert_eq!(transitions_array(&out.transitions).shape(), &[5, 2, 2, 2]);
    }
}
