use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::conv_output_extent;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    fn new(name: &str, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            out_channels,
            kernel,
            stride,
        }
    }

    /// "Same"-style padding used by every encoder layer.
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

/// Geometry of the feature-encoding CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: Vec<LayerSpec>,
    /// Input frame width in pixels.
    pub width: usize,
    /// Input frame height in pixels.
    pub height: usize,
    /// Scales every layer's channel count (1.0 reproduces the full network).
    pub width_multiplier: f64,
}

pub const INPUT_CHANNELS: usize = 6;

fn full_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new("conv1", 64, 7, 2),
        LayerSpec::new("conv2", 128, 5, 2),
        LayerSpec::new("conv3", 256, 5, 2),
        LayerSpec::new("conv3_1", 256, 3, 1),
        LayerSpec::new("conv4", 512, 3, 2),
        LayerSpec::new("conv4_1", 512, 3, 1),
        LayerSpec::new("conv5", 512, 3, 2),
        LayerSpec::new("conv5_1", 512, 3, 1),
        LayerSpec::new("conv6", 1024, 3, 2),
        LayerSpec::new("conv6_1", 1024, 3, 1),
    ]
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl EncoderConfig {
    /// Ten-layer encoder on 1280x384 frames.
    pub fn full() -> Self {
        EncoderConfig {
            layers: full_layers(),
            width: 1280,
            height: 384,
            width_multiplier: 1.0,
        }
    }

    /// Desk-scale preset: 320x96 frames, a quarter of the channels.
    pub fn quarter() -> Self {
        EncoderConfig {
            width: 320,
            height: 96,
            width_multiplier: 0.25,
            ..Self::full()
        }
    }

    /// Gradient-check preset: 64x24 frames, a sixteenth of the channels.
    pub fn tiny() -> Self {
        EncoderConfig {
            width: 64,
            height: 24,
            width_multiplier: 1.0 / 16.0,
            ..Self::full()
        }
    }

    pub fn channels(&self, layer: usize) -> usize {
        ((self.layers[layer].out_channels as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// `(name, [channels, height, width])` after every layer, ending with
    /// the pooled feature map.
    pub fn layer_shapes(&self) -> Result<Vec<(String, [usize; 3])>> {
        if self.layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        let (mut h, mut w) = (self.height, self.width);
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride == 0 || l.kernel == 0 || l.out_channels == 0 {
                return Err(Error::Config(format!("layer {} has a zero extent", l.name)));
            }
            let (Some(nh), Some(nw)) = (
                conv_output_extent(h, l.kernel, l.stride, l.padding()),
                conv_output_extent(w, l.kernel, l.stride, l.padding()),
            ) else {
                return Err(Error::Config(format!(
                    "input {}x{} is too small for layer {}",
                    self.width, self.height, l.name
                )));
            };
            h = nh;
            w = nw;
            shapes.push((l.name.clone(), [self.channels(i), h, w]));
        }
        let c = self.channels(self.layers.len() - 1);
        shapes.push(("max_pool".to_string(), [c, h.div_ceil(2), w.div_ceil(2)]));
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<[usize; 3]> {
        Ok(self.layer_shapes()?.last().expect("non-empty").1)
    }

    fn layers_string(&self) -> String {
        self.layers
            .iter()
            .map(|l| format!("{}:{}:{}:{}", l.name, l.out_channels, l.kernel, l.stride))
            .collect::<Vec<_>>()
            .join(",")
    }

    fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
        s.split(',')
            .map(|item| {
                let parts: Vec<&str> = item.split(':').collect();
                let bad = || Error::Config(format!("bad layer spec {item:?}"));
                if parts.len() != 4 {
                    return Err(bad());
                }
                let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
                Ok(LayerSpec {
                    name: parts[0].to_string(),
                    out_channels: num(parts[1])?,
                    kernel: num(parts[2])?,
                    stride: num(parts[3])?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Encoder, stacked ConvGRU memory and regression head.
    Recurrent,
    /// Encoder feeding the regression head directly (pretraining / ablation).
    CnnOnly,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Recurrent => "recurrent",
            ModelKind::CnnOnly => "cnn-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(ModelKind::Recurrent),
            "cnn-only" => Ok(ModelKind::CnnOnly),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

/// Complete architecture description; stored in every checkpoint so a model
/// can be rebuilt without the training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub gru_cells: usize,
    /// Hidden width of the first fully-connected head layer.
    pub head_hidden: usize,
    /// Dropout probability after the first head layer (training only).
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Recurrent,
            encoder: EncoderConfig::full(),
            gru_cells: 3,
            head_hidden: 512,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn quarter() -> Self {
        ModelConfig {
            encoder: EncoderConfig::quarter(),
            ..Default::default()
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            head_hidden: 32,
            ..Default::default()
        }
    }

    /// Named preset: `full`, `quarter` or `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "quarter" => Ok(Self::quarter()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown model scale {name:?}"))),
        }
    }

    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.layer_shapes()?;
        if self.kind == ModelKind::Recurrent && self.gru_cells == 0 {
            return Err(Error::Config("a recurrent model needs at least one GRU cell".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model.kind".into(), self.kind.as_str().into());
        m.insert("model.layers".into(), self.encoder.layers_string());
        m.insert("model.width".into(), self.encoder.width.to_string());
        m.insert("model.height".into(), self.encoder.height.to_string());
        m.insert(
            "model.width_multiplier".into(),
            format!("{:?}", self.encoder.width_multiplier),
        );
        m.insert("model.gru_cells".into(), self.gru_cells.to_string());
        m.insert("model.head_hidden".into(), self.head_hidden.to_string());
        m.insert("model.dropout".into(), format!("{:?}", self.dropout));
        m
    }

    pub fn from_metadata(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            m.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing architecture key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {k}")))
        };
        let cfg = ModelConfig {
            kind: ModelKind::parse(get("model.kind")?)?,
            encoder: EncoderConfig {
                layers: EncoderConfig::parse_layers(get("model.layers")?)?,
                width: num("model.width")?,
                height: num("model.height")?,
                width_multiplier: real("model.width_multiplier")?,
            },
            gru_cells: num("model.gru_cells")?,
            head_hidden: num("model.head_hidden")?,
            dropout: real("model.dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
