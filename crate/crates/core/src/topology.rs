//! Layer topologies: fan-ins, parameter and FLOP counts, width scaling.
//!
//! A [`Topology`] is an ordered stack of dense or (grouped) 2-D convolution
//! layers without biases. Some hidden widths are flagged *searchable*: they
//! follow the scalar search width `n` when the block is rescaled.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::TopologyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
}

/// One weight layer. Convolutions use stride 1 and zero "same" padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_width: usize,
    pub out_width: usize,
    pub kernel: usize,
    pub groups: usize,
    /// ReLU applied to this layer's output.
    pub has_activation: bool,
}

impl LayerSpec {
    pub fn dense(in_width: usize, out_width: usize, has_activation: bool) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_width,
            out_width,
            kernel: 1,
            groups: 1,
            has_activation,
        }
    }

    pub fn conv2d(in_width: usize, out_width: usize, kernel: usize, groups: usize, has_activation: bool) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            in_width,
            out_width,
            kernel,
            groups,
            has_activation,
        }
    }

    /// Inputs feeding one output unit: `in_width` for dense layers,
    /// `kernel² · in_width / groups` for convolutions.
    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_width / self.groups
    }

    /// Weight count (no biases).
    pub fn param_count(&self) -> usize {
        self.fan_in() * self.out_width
    }

    /// Per-layer weight scale `sqrt(c / fan_in)` with `c = 2` ahead of a
    /// ReLU and `c = 1` otherwise.
    pub fn weight_scale(&self) -> f64 {
        self.weight_variance().sqrt()
    }

    /// `c / fan_in`, the square of [`Self::weight_scale`] without the rounding.
    pub fn weight_variance(&self) -> f64 {
        let gain = if self.has_activation { 2.0 } else { 1.0 };
        gain / self.fan_in() as f64
    }

    fn check(&self, index: usize) -> Result<(), TopologyError> {
        if self.in_width == 0 || self.out_width == 0 || self.kernel == 0 || self.groups == 0 {
            return Err(TopologyError::ZeroDimension { layer: index });
        }
        match self.kind {
            LayerKind::Dense => {
                if self.kernel != 1 || self.groups != 1 {
                    return Err(TopologyError::DenseShape { layer: index });
                }
            }
            LayerKind::Conv2d => {
                if self.kernel.is_multiple_of(2) {
                    return Err(TopologyError::EvenKernel {
                        layer: index,
                        kernel: self.kernel,
                    });
                }
            }
        }
        if !self.in_width.is_multiple_of(self.groups) || !self.out_width.is_multiple_of(self.groups) {
            return Err(TopologyError::GroupsDivisibility {
                layer: index,
                groups: self.groups,
                in_width: self.in_width,
                out_width: self.out_width,
            });
        }
        Ok(())
    }
}

/// How the final layer's output tensor collapses to the scalar network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Readout {
    /// `F = Σ_p z_p / sqrt(P)` over all `P` output coordinates (global
    /// average pooling up to a constant). For a single output this is the
    /// identity.
    #[default]
    Pooled,
    /// `F = z[index]` on the channel-major flattened output.
    Single { index: usize },
}

/// Ordered, validated layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TopologyConfig", into = "TopologyConfig")]
pub struct Topology {
    layers: Vec<LayerSpec>,
    input_width: usize,
    spatial_size: Option<(usize, usize)>,
    searchable: Vec<bool>,
    readout: Readout,
}

impl Topology {
    /// Validates the layer stack. `searchable[l]` marks that layer `l`'s
    /// output width follows the search width.
    pub fn new(
        input_width: usize,
        layers: Vec<LayerSpec>,
        searchable: Vec<bool>,
        spatial_size: Option<(usize, usize)>,
        readout: Readout,
    ) -> Result<Self, TopologyError> {
        let topology = Self {
            layers,
            input_width,
            spatial_size,
            searchable,
            readout,
        };
        topology.validate()?;
        Ok(topology)
    }

    fn validate(&self) -> Result<(), TopologyError> {
        if self.layers.is_empty() {
            return Err(TopologyError::Empty);
        }
        if self.searchable.len() != self.layers.len() {
            return Err(TopologyError::MaskLength {
                expected: self.layers.len(),
                got: self.searchable.len(),
            });
        }
        if self.input_width != self.layers[0].in_width {
            return Err(TopologyError::InputWidth {
                input_width: self.input_width,
                first_in: self.layers[0].in_width,
            });
        }
        let kind = self.layers[0].kind;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.check(i)?;
            if layer.kind != kind {
                return Err(TopologyError::MixedKinds { layer: i });
            }
            if let Some(next) = self.layers.get(i + 1) {
                if next.in_width != layer.out_width {
                    return Err(TopologyError::DimensionMismatch {
                        layer: i,
                        out_width: layer.out_width,
                        next_in: next.in_width,
                    });
                }
            }
        }
        if self.layers.last().is_some_and(|l| l.has_activation) {
            return Err(TopologyError::FinalActivation);
        }
        if let Some((h, w)) = self.spatial_size {
            if h == 0 || w == 0 {
                return Err(TopologyError::ZeroDimension { layer: 0 });
            }
        }
        if let Readout::Single { index } = self.readout {
            if let Some(len) = self.output_len() {
                if index >= len {
                    return Err(TopologyError::ReadoutIndex { index, len });
                }
            }
        }
        Ok(())
    }

    /// Fully-connected ReLU network `input -> hidden... -> 1`; every hidden
    /// width is searchable.
    pub fn mlp(input_width: usize, hidden: &[usize]) -> Result<Self, TopologyError> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_width;
        for &h in hidden {
            layers.push(LayerSpec::dense(prev, h, true));
            prev = h;
        }
        layers.push(LayerSpec::dense(prev, 1, false));
        let mut searchable = vec![true; hidden.len()];
        searchable.push(false);
        Self::new(input_width, layers, searchable, None, Readout::Pooled)
    }

    /// Residual bottleneck branch `conv1x1(n_in→n) → conv3x3(n→n) →
    /// conv1x1(n→n_out)` with ReLUs after the first two convolutions and a
    /// pooled scalar readout. The two inner widths are searchable.
    pub fn bottleneck(
        n_in: usize,
        width: usize,
        n_out: usize,
        spatial_size: Option<(usize, usize)>,
    ) -> Result<Self, TopologyError> {
        let layers = vec![
            LayerSpec::conv2d(n_in, width, 1, 1, true),
            LayerSpec::conv2d(width, width, 3, 1, true),
            LayerSpec::conv2d(width, n_out, 1, 1, false),
        ];
        Self::new(n_in, layers, vec![true, true, false], spatial_size, Readout::Pooled)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn spatial_size(&self) -> Option<(usize, usize)> {
        self.spatial_size
    }

    pub fn searchable_mask(&self) -> &[bool] {
        &self.searchable
    }

    pub fn readout(&self) -> Readout {
        self.readout
    }

    pub fn is_conv(&self) -> bool {
        self.layers[0].kind == LayerKind::Conv2d
    }

    /// Spatial positions per feature map: 1 for dense stacks, `H·W` for
    /// convolutional stacks (`None` when a conv stack lacks a spatial size).
    pub fn positions(&self) -> Option<usize> {
        if self.is_conv() {
            self.spatial_size.map(|(h, w)| h * w)
        } else {
            Some(1)
        }
    }

    /// Flattened input length (`channels · H · W` for conv stacks).
    pub fn input_len(&self) -> Option<usize> {
        self.positions().map(|p| p * self.input_width)
    }

    /// Flattened length of the final layer's output.
    pub fn output_len(&self) -> Option<usize> {
        self.positions()
            .map(|p| p * self.layers.last().map_or(0, |l| l.out_width))
    }

    /// Σ_l 1 / fan_in(l) over every layer, including those whose fan-in is
    /// pinned by the input width.
    pub fn inverse_fanin_sum(&self) -> f64 {
        self.layers.iter().map(|l| 1.0 / l.fan_in() as f64).sum()
    }

    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count() as u64).sum()
    }

    /// Two FLOPs per multiply-accumulate; a convolution layer performs
    /// `param_count · H · W` MACs, a dense layer `param_count`.
    pub fn flop_count(&self) -> Result<u64, TopologyError> {
        let positions = self.positions().ok_or(TopologyError::MissingSpatial)? as u64;
        Ok(self.layers.iter().map(|l| 2 * l.param_count() as u64 * positions).sum())
    }

    /// The baseline search width: output width of the first searchable layer.
    pub fn search_width(&self) -> Option<usize> {
        self.layers
            .iter()
            .zip(&self.searchable)
            .find(|(_, &s)| s)
            .map(|(l, _)| l.out_width)
    }

    /// Multiplies every searchable width by `ratio`, rounding to the nearest
    /// integer (halves away from zero) with a floor of 1. The following
    /// layer's input width tracks the new value.
    pub fn scale_widths(&self, ratio: Ratio<u64>) -> Result<Self, TopologyError> {
        if *ratio.numer() == 0 || *ratio.denom() == 0 {
            return Err(TopologyError::InvalidRatio);
        }
        let (num, den) = (*ratio.numer() as u128, *ratio.denom() as u128);
        let mut layers = self.layers.clone();
        for i in 0..layers.len() {
            if !self.searchable[i] {
                continue;
            }
            let old = layers[i].out_width as u128;
            let scaled = ((2 * old * num + den) / (2 * den)).max(1) as usize;
            layers[i].out_width = scaled;
            if let Some(next) = layers.get_mut(i + 1) {
                next.in_width = scaled;
            }
        }
        Self::new(
            self.input_width,
            layers,
            self.searchable.clone(),
            self.spatial_size,
            self.readout,
        )
    }

    /// Rescales so the search width becomes `n` (ratio `n / search_width`).
    pub fn with_search_width(&self, n: usize) -> Result<Self, TopologyError> {
        let base = self.search_width().ok_or(TopologyError::NotSearchable)?;
        self.scale_widths(Ratio::new(n as u64, base as u64))
    }

    /// Same topology with a different spatial size.
    pub fn with_spatial_size(&self, spatial_size: Option<(usize, usize)>) -> Result<Self, TopologyError> {
        Self::new(
            self.input_width,
            self.layers.clone(),
            self.searchable.clone(),
            spatial_size,
            self.readout,
        )
    }

    /// Same topology with a different input width (first layer fan-in).
    pub fn with_input_width(&self, input_width: usize) -> Result<Self, TopologyError> {
        let mut layers = self.layers.clone();
        layers[0].in_width = input_width;
        Self::new(
            input_width,
            layers,
            self.searchable.clone(),
            self.spatial_size,
            self.readout,
        )
    }
}

/// Declarative on-disk form of a [`Topology`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub input_width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_size: Option<[usize; 2]>,
    #[serde(default)]
    pub readout: Readout,
    pub layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub kind: LayerKind,
    pub in_width: usize,
    pub out_width: usize,
    #[serde(default = "one")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub activation: bool,
    #[serde(default)]
    pub searchable: bool,
}

fn one() -> usize {
    1
}

impl TryFrom<TopologyConfig> for Topology {
    type Error = TopologyError;

    fn try_from(cfg: TopologyConfig) -> Result<Self, Self::Error> {
        let searchable = cfg.layers.iter().map(|l| l.searchable).collect();
        let layers = cfg
            .layers
            .into_iter()
            .map(|l| LayerSpec {
                kind: l.kind,
                in_width: l.in_width,
                out_width: l.out_width,
                kernel: l.kernel,
                groups: l.groups,
                has_activation: l.activation,
            })
            .collect();
        Topology::new(
            cfg.input_width,
            layers,
            searchable,
            cfg.spatial_size.map(|[h, w]| (h, w)),
            cfg.readout,
        )
    }
}

impl From<Topology> for TopologyConfig {
    fn from(t: Topology) -> Self {
        let layers = t
            .layers
            .iter()
            .zip(&t.searchable)
            .map(|(l, &searchable)| LayerConfig {
                kind: l.kind,
                in_width: l.in_width,
                out_width: l.out_width,
                kernel: l.kernel,
                groups: l.groups,
                activation: l.has_activation,
                searchable,
            })
            .collect();
        TopologyConfig {
            input_width: t.input_width,
            spatial_size: t.spatial_size.map(|(h, w)| [h, w]),
            readout: t.readout,
            layers,
        }
    }
}
