//! Plain convolutional backbones (3×3 kernels, padding 1, per-channel bias,
//! leaky ReLU).
//!
//! Backbones are looked up by string id. Biases start at zero, so a freshly
//! initialised backbone maps an all-zero slice to all-zero features.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BACKBONE: &str = "tiny-cnn";
pub const DESK_BACKBONE: &str = "tiny-cnn-desk";

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneArch {
    pub id: String,
    pub layers: Vec<ConvSpec>,
}

impl BackboneArch {
    /// Registered architectures:
    ///
    /// * `tiny-cnn`: stride-2 stem plus four stride-2 blocks, 64 output planes,
    ///   total downsampling ×32 (224 → 7).
    /// * `tiny-cnn-desk`: two stride-2 layers and one stride-1 layer, 32 planes,
    ///   downsampling ×4. Meant for small (e.g. 32×32) synthetic slices.
    /// * `tiny-test`: two layers with 4 planes, used by gradient checks.
    pub fn from_id(id: &str) -> Result<Self> {
        let c = |out_channels, stride| ConvSpec {
            out_channels,
            stride,
        };
        let layers = match id {
            DEFAULT_BACKBONE => vec![c(8, 2), c(16, 2), c(32, 2), c(64, 2), c(64, 2)],
            DESK_BACKBONE => vec![c(8, 2), c(16, 2), c(32, 1)],
            "tiny-test" => vec![c(3, 2), c(4, 1)],
            other => return Err(Error::UnknownBackbone(other.to_string())),
        };
        Ok(Self {
            id: id.to_string(),
            layers,
        })
    }

    pub fn registered() -> &'static [&'static str] {
        &[DEFAULT_BACKBONE, DESK_BACKBONE, "tiny-test"]
    }

    /// Number of feature planes K.
    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.out_channels)
    }

    pub fn downsample(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Validates an input size and returns the feature-map size.
    ///
    /// Inputs must be a positive multiple of the total downsampling factor.
    pub fn feature_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let d = self.downsample();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::shape(format!(
                "backbone `{}` needs input sides that are positive multiples of {d}, got {height}×{width}",
                self.id
            )));
        }
        Ok((height / d, width / d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub arch: BackboneArch,
    /// One `(out, in, 3, 3)` kernel per layer.
    pub weights: Vec<Array4<f64>>,
    /// One per-channel bias vector per layer.
    pub biases: Vec<Array1<f64>>,
}

/// Gradient buffers shaped like a [`Backbone`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrads {
    pub weights: Vec<Array4<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneTape {
    layers: Vec<LayerTape>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    cols: Array2<f64>,
    pre: Array2<f64>,
    in_dims: (usize, usize, usize),
}

impl Backbone {
    /// Xavier-uniform kernels, `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`;
    /// zero biases.
    pub fn xavier<R: Rng>(arch: BackboneArch, rng: &mut R) -> Self {
        let mut in_ch = 1;
        let mut weights = Vec::with_capacity(arch.layers.len());
        for layer in &arch.layers {
            let fan_in = (in_ch * 9) as f64;
            let fan_out = (layer.out_channels * 9) as f64;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            let w = Array4::from_shape_simple_fn((layer.out_channels, in_ch, 3, 3), || {
                rng.gen_range(-bound..bound)
            });
            weights.push(w);
            in_ch = layer.out_channels;
        }
        let biases = arch.layers.iter().map(|l| Array1::zeros(l.out_channels)).collect();
        Self { arch, weights, biases }
    }

    pub fn zeros_like(&self) -> BackboneGrads {
        BackboneGrads {
            weights: self.weights.iter().map(|w| Array4::zeros(w.dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.arch.feature_channels()
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array3<f64>> {
        self.run(input, false).map(|(f, _)| f)
    }

    pub fn forward_taped(&self, input: ArrayView2<f64>) -> Result<(Array3<f64>, BackboneTape)> {
        self.run(input, true)
            .map(|(f, t)| (f, t.expect("tape requested")))
    }

    fn run(&self, input: ArrayView2<f64>, keep: bool) -> Result<(Array3<f64>, Option<BackboneTape>)> {
        let (h, w) = input.dim();
        self.arch.feature_size(h, w)?;
        let mut x = input
            .to_owned()
            .into_shape_with_order((1, h, w))
            .expect("contiguous reshape");
        let mut tapes = Vec::new();
        for ((spec, kernel), bias) in self.arch.layers.iter().zip(&self.weights).zip(&self.biases) {
            let in_dims = x.dim();
            let (cols, ho, wo) = im2col(&x, spec.stride);
            let kmat = kernel_matrix(kernel);
            let mut pre = kmat.dot(&cols);
            pre += &bias.view().insert_axis(Axis(1));
            let act = pre.mapv(leaky_relu);
            x = act
                .into_shape_with_order((spec.out_channels, ho, wo))
                .expect("contiguous reshape");
            if keep {
                tapes.push(LayerTape { cols, pre, in_dims });
            }
        }
        Ok((x, keep.then_some(BackboneTape { layers: tapes })))
    }

    /// Accumulates dL/dθ into `grads` given dL/dfeatures.
    pub fn backward(&self, tape: &BackboneTape, d_features: &Array3<f64>, grads: &mut BackboneGrads) {
        let (k, fh, fw) = d_features.dim();
        let mut d = d_features
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((k, fh * fw))
            .expect("contiguous reshape");
        for l in (0..self.weights.len()).rev() {
            let lt = &tape.layers[l];
            let stride = self.arch.layers[l].stride;
            let mut d_pre = d;
            d_pre.zip_mut_with(&lt.pre, |g, &p| {
                if p <= 0.0 {
                    *g *= LEAKY_SLOPE
                }
            });
            grads.biases[l] += &d_pre.sum_axis(Axis(1));
            let dw = d_pre.dot(&lt.cols.t());
            let g = &mut grads.weights[l];
            let shape = g.dim();
            *g += &dw.into_shape_with_order(shape).expect("kernel shape");
            if l > 0 {
                let kmat = kernel_matrix(&self.weights[l]);
                let dcols = kmat.t().dot(&d_pre);
                let (c, h, w) = lt.in_dims;
                d = col2im(&dcols, lt.in_dims, stride)
                    .into_shape_with_order((c, h * w))
                    .expect("contiguous reshape");
            } else {
                break;
            }
        }
    }
}

fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn kernel_matrix(kernel: &Array4<f64>) -> ArrayView2<'_, f64> {
    let (o, i, _, _) = kernel.dim();
    kernel
        .view()
        .into_shape_with_order((o, i * 9))
        .expect("kernels are stored in standard layout")
        .into_dimensionality::<Ix2>()
        .unwrap()
}

fn out_size(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

/// Unfolds 3×3 patches (padding 1) into a `(c·9, ho·wo)` matrix.
fn im2col(input: &Array3<f64>, stride: usize) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = input.dim();
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let input = input.as_standard_layout();
    let src = input.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * 9, ho * wo));
    let dst = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut dst[(ci * 9 + ky * 3 + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for ox in 0..wo {
                        let ix = ox * stride + kx;
                        if ix == 0 || ix > w {
                            continue;
                        }
                        row[oy * wo + ox] = plane[iy * w + ix - 1];
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
fn col2im(cols: &Array2<f64>, (c, h, w): (usize, usize, usize), stride: usize) -> Array3<f64> {
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = Array3::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[(ci * 9 + ky * 3 + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    if iy == 0 || iy > h {
                        continue;
                    }
                    let iy = iy - 1;
                    for ox in 0..wo {
                        let ix = ox * stride + kx;
                        if ix == 0 || ix > w {
                            continue;
                        }
                        plane[iy * w + ix - 1] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn default_backbone_maps_224_to_7x7() {
        let b = Backbone::xavier(BackboneArch::from_id(DEFAULT_BACKBONE).unwrap(), &mut rng());
        let x = Array2::from_shape_fn((224, 224), |(i, j)| ((i * 7 + j) % 13) as f64 / 13.0);
        let f = b.forward(x.view()).unwrap();
        assert_eq!(f.dim(), (64, 7, 7));
    }

    #[test]
    fn rejects_incompatible_input() {
        let b = Backbone::xavier(BackboneArch::from_id(DEFAULT_BACKBONE).unwrap(), &mut rng());
        let err = b.forward(Array2::zeros((100, 224)).view()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn unknown_id_is_an_error() {
        assert!(matches!(
            BackboneArch::from_id("resnet-9000"),
            Err(Error::UnknownBackbone(_))
        ));
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let b = Backbone::xavier(BackboneArch::from_id(DESK_BACKBONE).unwrap(), &mut rng());
        let f = b.forward(Array2::zeros((32, 32)).view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_forward_is_bitwise_identical() {
        let b = Backbone::xavier(BackboneArch::from_id(DESK_BACKBONE).unwrap(), &mut rng());
        let x = Array2::from_shape_fn((32, 32), |(i, j)| ((i as f64) * 0.3 - (j as f64) * 0.1).sin());
        let a = b.forward(x.view()).unwrap();
        let c = b.forward(x.view()).unwrap();
        assert!(a.iter().zip(c.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut r = rng();
        for stride in [1, 2] {
            let x = Array3::from_shape_simple_fn((2, 6, 5), || r.gen_range(-1.0..1.0));
            let (cols, _, _) = im2col(&x, stride);
            let y = Array2::from_shape_simple_fn(cols.dim(), || r.gen_range(-1.0..1.0));
            let lhs = (&cols * &y).sum();
            let rhs = (&x * &col2im(&y, x.dim(), stride)).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut r = rng();
        let b = Backbone::xavier(BackboneArch::from_id("tiny-test").unwrap(), &mut r);
        let x = Array2::from_shape_simple_fn((8, 8), || r.gen_range(-1.0..1.0));
        let probe = {
            let f = b.forward(x.view()).unwrap();
            Array3::from_shape_simple_fn(f.dim(), || r.gen_range(-1.0..1.0))
        };
        let loss = |bb: &Backbone| (&bb.forward(x.view()).unwrap() * &probe).sum();
        let (_, tape) = b.forward_taped(x.view()).unwrap();
        let mut grads = b.zeros_like();
        b.backward(&tape, &probe, &mut grads);
        let eps = 1e-5;
        for l in 0..b.weights.len() {
            for idx in 0..b.weights[l].len() {
                let mut plus = b.clone();
                plus.weights[l].as_slice_mut().unwrap()[idx] += eps;
                let mut minus = b.clone();
                minus.weights[l].as_slice_mut().unwrap()[idx] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = grads.weights[l].as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "layer {l} idx {idx}: fd {fd} vs analytic {an}"
                );
            }
            for c in 0..b.biases[l].len() {
                let mut plus = b.clone();
                plus.biases[l][c] += eps;
                let mut minus = b.clone();
                minus.biases[l][c] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = grads.biases[l][c];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "bias {l}/{c}: {fd} vs {an}");
            }
        }
    }
}
