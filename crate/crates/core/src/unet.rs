//! Valid-padding encoder-decoder network (U-Net layout).
//!
//! Each encoder stage runs two 3×3 valid convolutions with ReLU and a 2×2
//! max-pool; channel width doubles per stage. The decoder mirrors it with
//! 2×2 stride-2 up-convolutions that halve the width, a center-cropped skip
//! concatenation, and two more 3×3 convolutions. A 1×1 convolution maps to
//! the two classes and a channel softmax turns logits into probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Spatial shrink of one pair of valid 3×3 convolutions.
const PAIR_SHRINK: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of down-sampling stages.
    pub depth: usize,
    /// Channels of the first encoder stage.
    pub base_width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full_width()
    }
}

impl ModelConfig {
    /// Full-width configuration (64 channels at the first stage).
    pub fn full_width() -> Self {
        Self { depth: 4, base_width: 64, in_channels: 3, num_classes: 2, seed: 0 }
    }

    /// Same network with every layer at half the filters.
    pub fn half_width() -> Self {
        Self::full_width().halved()
    }

    pub fn halved(&self) -> Self {
        Self { base_width: self.base_width / 2, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("model depth must be at least 1".into()));
        }
        if self.base_width < 1 {
            return Err(Error::Config("model base_width must be at least 1".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("model in_channels must be at least 1".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!("num_classes must be 2, got {}", self.num_classes)));
        }
        Ok(())
    }

    /// Channel width at encoder stage `i`; `i == depth` is the bottleneck.
    pub fn width_at(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Context margin per side: input extent = output extent + 2·margin.
    pub fn margin(&self) -> usize {
        margin_for_depth(self.depth)
    }
}

/// `(12·2^depth − 8) / 2`: total shrink of the valid layout, halved.
pub fn margin_for_depth(depth: usize) -> usize {
    6 * (1 << depth) - 4
}

/// Shape of each parameter tensor, in network order.
fn layer_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    let conv = |name: String, cin: usize, cout: usize, k: usize, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
        out.push((format!("{name}.bias"), vec![cout]));
    };
    let mut cin = cfg.in_channels;
    for stage in 0..cfg.depth {
        let w = cfg.width_at(stage);
        conv(format!("enc{stage}.conv1"), cin, w, 3, &mut shapes);
        conv(format!("enc{stage}.conv2"), w, w, 3, &mut shapes);
        cin = w;
    }
    let wb = cfg.width_at(cfg.depth);
    conv("bottleneck.conv1".into(), cin, wb, 3, &mut shapes);
    conv("bottleneck.conv2".into(), wb, wb, 3, &mut shapes);
    for stage in (0..cfg.depth).rev() {
        let (wi, wu) = (cfg.width_at(stage), cfg.width_at(stage + 1));
        shapes.push((format!("dec{stage}.up.weight"), vec![wu, wi, 2, 2]));
        shapes.push((format!("dec{stage}.up.bias"), vec![wi]));
        conv(format!("dec{stage}.conv1"), 2 * wi, wi, 3, &mut shapes);
        conv(format!("dec{stage}.conv2"), wi, wi, 3, &mut shapes);
    }
    conv("head".into(), cfg.base_width, cfg.num_classes, 1, &mut shapes);
    shapes
}

/// Weights plus biases of one `k×k` convolution.
pub fn conv_param_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

/// Exact number of trainable scalars, from layer arithmetic alone.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let conv = conv_param_count;
    let mut total = 0;
    let mut cin = cfg.in_channels;
    for stage in 0..cfg.depth {
        let w = cfg.width_at(stage);
        total += conv(cin, w, 3) + conv(w, w, 3);
        cin = w;
    }
    let wb = cfg.width_at(cfg.depth);
    total += conv(cin, wb, 3) + conv(wb, wb, 3);
    for stage in 0..cfg.depth {
        let (wi, wu) = (cfg.width_at(stage), cfg.width_at(stage + 1));
        total += wu * wi * 4 + wi;
        total += conv(2 * wi, wi, 3) + conv(wi, wi, 3);
    }
    total + conv(cfg.base_width, cfg.num_classes, 1)
}

/// Input/output patch extents of the network. `input = output + 2·margin`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub output_w: usize,
    pub output_h: usize,
    pub input_w: usize,
    pub input_h: usize,
    pub margin: usize,
}

/// Input extent that yields `output` along one axis, if every intermediate
/// extent is integral.
pub fn input_extent(depth: usize, output: usize) -> Option<usize> {
    if output == 0 {
        return None;
    }
    let mut x = output;
    for _ in 0..depth {
        x += PAIR_SHRINK;
        if !x.is_multiple_of(2) {
            return None;
        }
        x /= 2;
    }
    x += PAIR_SHRINK;
    for _ in 0..depth {
        x = 2 * x + PAIR_SHRINK;
    }
    Some(x)
}

/// Output extent produced by `input` along one axis, if the layout divides.
pub fn output_extent(depth: usize, input: usize) -> Option<usize> {
    let mut x = input;
    for _ in 0..depth {
        x = x.checked_sub(PAIR_SHRINK)?;
        if x == 0 || !x.is_multiple_of(2) {
            return None;
        }
        x /= 2;
    }
    x = x.checked_sub(PAIR_SHRINK).filter(|&v| v > 0)?;
    for _ in 0..depth {
        x = (2 * x).checked_sub(PAIR_SHRINK).filter(|&v| v > 0)?;
    }
    Some(x)
}

fn nearest_valid_outputs(depth: usize, requested: usize) -> (Option<usize>, Option<usize>) {
    let below = (1..requested).rev().find(|&o| input_extent(depth, o).is_some());
    let above = (requested + 1..requested + (2 << depth) + 1).find(|&o| input_extent(depth, o).is_some());
    (below, above)
}

fn axis_input(depth: usize, output: usize, axis: &str) -> Result<usize> {
    input_extent(depth, output).ok_or_else(|| {
        let (below, above) = nearest_valid_outputs(depth, output);
        let fmt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        Error::Geometry(format!(
            "output {axis} {output} is not reachable at depth {depth}; nearest valid sizes: {} and {}",
            fmt(below),
            fmt(above)
        ))
    })
}

/// Geometry for a requested output patch size.
pub fn geometry(cfg: &ModelConfig, output_w: usize, output_h: usize) -> Result<GeometrySpec> {
    let input_w = axis_input(cfg.depth, output_w, "width")?;
    let input_h = axis_input(cfg.depth, output_h, "height")?;
    Ok(GeometrySpec { output_w, output_h, input_w, input_h, margin: cfg.margin() })
}

/// Geometry for a given input patch size.
pub fn geometry_from_input(cfg: &ModelConfig, input_w: usize, input_h: usize) -> Result<GeometrySpec> {
    let out = |n: usize, axis: &str| {
        output_extent(cfg.depth, n).ok_or_else(|| {
            Error::Geometry(format!("input {axis} {n} does not divide through depth {}", cfg.depth))
        })
    };
    let output_w = out(input_w, "width")?;
    let output_h = out(input_h, "height")?;
    Ok(GeometrySpec { output_w, output_h, input_w, input_h, margin: cfg.margin() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Network parameters plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    params: Vec<Param<T>>,
}

impl<T: Real> Model<T> {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layer_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    // up-convolution kernels are (Cin, Cout, 2, 2): each output
                    // sees Cin taps; conv kernels (Cout, Cin, k, k)
                    let fan_in = if name.contains(".up.") { shape[0] } else { shape[1] * shape[2] * shape[3] };
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(&shape, |_| T::from_f64(normal.sample(&mut rng)))
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Reassemble a model from named tensors; names and shapes must match
    /// the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let expected = layer_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape[..] != *p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
        }
    }

    /// Push every parameter onto `g` as a leaf, in parameter order.
    pub fn attach(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    /// Output extents for an input patch, or a geometry error.
    pub fn output_size(&self, input_h: usize, input_w: usize) -> Result<(usize, usize)> {
        let g = geometry_from_input(&self.config, input_w, input_h)?;
        Ok((g.output_h, g.output_w))
    }

    /// Record the forward pass of `input` on `g` using parameter leaves
    /// from [`Model::attach`]. Returns the probability node `(2, out_h, out_w)`.
    pub fn forward_graph(&self, g: &mut Graph<T>, params: &[NodeId], input: NodeId) -> Result<NodeId> {
        let (c, h, w) = g.value(input).chw()?;
        if c != self.config.in_channels {
            return Err(Error::Geometry(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        self.output_size(h, w)?;

        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter list matches layout");
        let conv_relu = |g: &mut Graph<T>, x: NodeId, k: NodeId, b: NodeId| g.conv2d_relu(x, k, b);

        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            let (k1, b1, k2, b2) = (take(), take(), take(), take());
            x = conv_relu(g, x, k1, b1)?;
            x = conv_relu(g, x, k2, b2)?;
            skips.push(x);
            x = g.maxpool2(x)?;
        }
        let (k1, b1, k2, b2) = (take(), take(), take(), take());
        x = conv_relu(g, x, k1, b1)?;
        x = conv_relu(g, x, k2, b2)?;
        for skip in skips.into_iter().rev() {
            let (ku, bu) = (take(), take());
            x = g.upconv2(x, ku, bu)?;
            let (_, uh, uw) = g.value(x).chw()?;
            let cropped = g.center_crop(skip, uh, uw)?;
            x = g.concat_channels(cropped, x)?;
            let (k1, b1, k2, b2) = (take(), take(), take(), take());
            x = conv_relu(g, x, k1, b1)?;
            x = conv_relu(g, x, k2, b2)?;
        }
        let (kh, bh) = (take(), take());
        let logits = g.conv2d(x, kh, bh)?;
        g.softmax_channels(logits)
    }

    /// Inference-only forward pass: `(in_channels, H, W)` → `(2, h, w)` probabilities.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let params = self.attach(&mut g);
        let x = g.leaf(input.clone());
        let out = self.forward_graph(&mut g, &params, x)?;
        Ok(g.into_value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_widths_double() {
        let cfg = ModelConfig::full_width();
        let widths: Vec<usize> = (0..=4).map(|s| cfg.width_at(s)).collect();
        assert_eq!(widths, vec![64, 128, 256, 512, 1024]);
        assert_eq!(ModelConfig::half_width().base_width, 32);
    }

    #[test]
    fn analytic_count_matches_layer_shapes() {
        for depth in 1..=4 {
            for width in [1, 4, 32, 64] {
                let cfg = ModelConfig { depth, base_width: width, ..ModelConfig::default() };
                let by_shape: usize = layer_shapes(&cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
                assert_eq!(param_count(&cfg), by_shape);
            }
        }
    }

    #[test]
    fn built_model_matches_count() {
        let cfg = ModelConfig { depth: 2, base_width: 4, ..ModelConfig::default() };
        let m = Model::<f32>::build(cfg.clone()).unwrap();
        assert_eq!(m.num_params(), param_count(&cfg));
    }

    #[test]
    fn single_pointwise_conv_count() {
        assert_eq!(conv_param_count(2, 2, 1), 6);
    }

    #[test]
    fn full_geometry() {
        let g = geometry(&ModelConfig::full_width(), 388, 388).unwrap();
        assert_eq!((g.input_w, g.input_h, g.margin), (572, 572, 92));
        assert_eq!(output_extent(4, 572), Some(388));
    }

    #[test]
    fn depth_one_margin() {
        assert_eq!(margin_for_depth(1), 8);
        assert_eq!(output_extent(1, 20), Some(4));
        assert_eq!(input_extent(1, 4), Some(20));
    }

    #[test]
    fn indivisible_size_suggests_neighbours() {
        let err = geometry(&ModelConfig::full_width(), 390, 388).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("388") && msg.contains("404"), "{msg}");
    }

    #[test]
    fn forward_rejects_bad_geometry() {
        let cfg = ModelConfig { depth: 1, base_width: 1, ..ModelConfig::default() };
        let m = Model::<f32>::build(cfg).unwrap();
        assert!(m.forward(&Tensor::zeros(&[3, 20, 20])).is_ok());
        assert!(matches!(m.forward(&Tensor::zeros(&[3, 21, 20])), Err(Error::Geometry(_))));
        assert!(matches!(m.forward(&Tensor::zeros(&[1, 20, 20])), Err(Error::Geometry(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = ModelConfig { num_classes: 3, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { depth: 0, ..ModelConfig::default() };
        assert!(Model::<f32>::build(cfg).is_err());
    }
}
