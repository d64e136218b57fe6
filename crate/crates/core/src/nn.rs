//! Layers shared by the detector, the descriptor and the domain classifiers.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
        gain: f64,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), he_normal(rng, &[c_out, c_in, k, k], c_in * k * k, gain));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
        gain: f64,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), he_normal(rng, &[d_out, d_in], d_in, gain));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    /// A layer whose weights start at zero (output equals the bias).
    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.insert(format!("{name}.weight"), Tensor::zeros(&[d_out, d_in]));
        let bias = Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Six 3×3 conv + SiLU blocks in three stages at strides 4, 8 and 16.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub layers: Vec<Conv>,
    pub channels: [usize; 3],
}

/// Index of the last layer in each stage.
pub const STAGE_ENDS: [usize; 3] = [1, 3, 5];
pub const STAGE_STRIDES: [usize; 3] = [4, 8, 16];

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, channels: [usize; 3], rng: &mut R) -> Self {
        let [a, b, c] = channels;
        let spec = [(1, a, 2), (a, a, 2), (a, b, 2), (b, b, 1), (b, c, 2), (c, c, 1)];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| Conv::new(store, &format!("{prefix}.conv{i}"), ci, co, 3, s, rng, 1.0))
            .collect();
        Self { layers, channels }
    }

    /// Runs all stages on `x` (N,1,H,W). `stage_hook` sees each stage output and
    /// may replace it (used to insert attention).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mut stage_hook: impl FnMut(&mut Graph, usize, Var) -> Var,
    ) -> Vec<Var> {
        let mut h = x;
        let mut stages = Vec::with_capacity(3);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            h = g.silu(h);
            if let Some(stage) = STAGE_ENDS.iter().position(|&e| e == i) {
                h = stage_hook(g, stage, h);
                stages.push(h);
            }
        }
        stages
    }
}

/// Packs grayscale images into an (N,1,H,W) tensor.
pub fn image_batch(images: &[&crate::datagen::GrayImage]) -> Tensor {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        assert_eq!((im.height, im.width), (h, w), "mixed image sizes in batch");
        data.extend_from_slice(&im.data);
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}
