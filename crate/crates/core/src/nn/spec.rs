use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv, Layer, Residual};
use crate::nn::params::{Layout, ParamSlot};

/// Supported architecture families. All are desk-scale; new ids slot in here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    /// Multinomial logistic regression on flattened pixels.
    Linear,
    /// One hidden ReLU layer (default width 8).
    MlpSmall,
    /// Two 3x3 conv layers with max pooling, then two dense layers.
    ConvSmall,
    /// Three 3x3 conv layers, then two dense layers.
    ConvMedium,
    /// Stem conv plus three residual blocks and global average pooling.
    ResnetTiny,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Linear,
        Architecture::MlpSmall,
        Architecture::ConvSmall,
        Architecture::ConvMedium,
        Architecture::ResnetTiny,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::MlpSmall => "mlp-small",
            Architecture::ConvSmall => "conv-small",
            Architecture::ConvMedium => "conv-medium",
            Architecture::ResnetTiny => "resnet-tiny",
        }
    }

    fn default_width(self) -> usize {
        match self {
            Architecture::Linear => 0,
            Architecture::MlpSmall => 8,
            Architecture::ConvSmall => 8,
            Architecture::ConvMedium => 16,
            Architecture::ResnetTiny => 8,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.id().to_string()
    }
}

fn default_seed() -> u64 {
    0
}

/// Model description: architecture, input geometry, class count and init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// Input shape `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Base channel / hidden width; architecture default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

impl ModelSpec {
    pub fn new(arch: Architecture, input: [usize; 3], classes: usize, seed: u64) -> Self {
        ModelSpec {
            arch,
            input,
            classes,
            seed,
            width: None,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = Some(width);
        self
    }

    pub fn width(&self) -> usize {
        self.width.unwrap_or_else(|| self.arch.default_width())
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "class count must be at least 2, got {}",
                self.classes
            )));
        }
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("empty input shape {:?}", self.input)));
        }
        if self.arch != Architecture::Linear && self.width() == 0 {
            return Err(Error::InvalidArgument("width must be positive".into()));
        }
        let [_, h, w] = self.input;
        let pools = match self.arch {
            Architecture::ConvSmall | Architecture::ConvMedium | Architecture::ResnetTiny => 2,
            _ => 0,
        };
        let div = 1 << pools;
        if h % div != 0 || w % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} needs height and width divisible by {div}, got {h}x{w}",
                self.arch
            )));
        }
        Ok(())
    }

    /// Build the layer graph and parameter layout.
    pub(crate) fn build(&self) -> Result<(Vec<Layer>, Layout)> {
        self.validate()?;
        let mut b = Builder::default();
        let [c, h, w] = self.input;
        let k = self.classes;
        let width = self.width();
        // Linear stays an affine map of raw pixels.
        let mut layers = match self.arch {
            Architecture::Linear => Vec::new(),
            _ => vec![Layer::Standardize],
        };
        layers.extend(match self.arch {
            Architecture::Linear => vec![
                Layer::Flatten,
                b.dense("fc", c * h * w, k, 1.0),
            ],
            Architecture::MlpSmall => vec![
                Layer::Flatten,
                b.dense("fc1", c * h * w, width, 2.0),
                Layer::Relu,
                b.dense("fc2", width, k, 1.0),
            ],
            Architecture::ConvSmall => vec![
                b.conv("conv1", c, width, 3, 2.0),
                Layer::Relu,
                Layer::MaxPool2,
                b.conv("conv2", width, 2 * width, 3, 2.0),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                b.dense("fc1", 2 * width * (h / 4) * (w / 4), 4 * width, 2.0),
                Layer::Relu,
                b.dense("fc2", 4 * width, k, 1.0),
            ],
            Architecture::ConvMedium => vec![
                b.conv("conv1", c, width, 3, 2.0),
                Layer::Relu,
                b.conv("conv2", width, 2 * width, 3, 2.0),
                Layer::Relu,
                Layer::MaxPool2,
                b.conv("conv3", 2 * width, 4 * width, 3, 2.0),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Flatten,
                b.dense("fc1", 4 * width * (h / 4) * (w / 4), 8 * width, 2.0),
                Layer::Relu,
                b.dense("fc2", 8 * width, k, 1.0),
            ],
            Architecture::ResnetTiny => vec![
                b.conv("stem", c, width, 3, 2.0),
                Layer::Relu,
                b.residual("block1", width, width),
                Layer::Relu,
                Layer::AvgPool2,
                b.residual("block2", width, 2 * width),
                Layer::Relu,
                Layer::AvgPool2,
                b.residual("block3", 2 * width, 2 * width),
                Layer::Relu,
                Layer::GlobalAvgPool,
                b.dense("fc", 2 * width, k, 1.0),
            ],
        });
        Ok((layers, Layout { slots: b.slots }))
    }
}

#[derive(Default)]
struct Builder {
    slots: Vec<ParamSlot>,
    offset: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, shape: Vec<usize>, fan_in: usize, gain: f64) -> usize {
        let len = shape.iter().product::<usize>();
        let off = self.offset;
        self.slots.push(ParamSlot {
            name,
            offset: off,
            shape,
            fan_in,
            gain,
        });
        self.offset += len;
        off
    }

    fn conv_raw(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
        let fan_in = cin * k * k;
        let w_off = self.alloc(format!("{name}.weight"), vec![cout, cin, k, k], fan_in, gain);
        let b_off = self.alloc(format!("{name}.bias"), vec![cout], fan_in, 0.0);
        Conv {
            cin,
            cout,
            k,
            pad: k / 2,
            w_off,
            b_off,
            init_gain: gain,
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Layer {
        Layer::Conv(self.conv_raw(name, cin, cout, k, gain))
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize, gain: f64) -> Layer {
        let w_off = self.alloc(format!("{name}.weight"), vec![fout, fin], fin, gain);
        let b_off = self.alloc(format!("{name}.bias"), vec![fout], fin, 0.0);
        Layer::Conv(Conv {
            cin: fin,
            cout: fout,
            k: 1,
            pad: 0,
            w_off,
            b_off,
            init_gain: gain,
        })
    }

    fn residual(&mut self, name: &str, cin: usize, cout: usize) -> Layer {
        let body = vec![
            self.conv(&format!("{name}.conv1"), cin, cout, 3, 2.0),
            Layer::Relu,
            // Damped second conv keeps the un-normalized residual stack stable at init.
            self.conv(&format!("{name}.conv2"), cout, cout, 3, 0.5),
        ];
        let shortcut = (cin != cout).then(|| self.conv_raw(&format!("{name}.shortcut"), cin, cout, 1, 1.0));
        Layer::Residual(Residual { body, shortcut })
    }
}
