//! Linear and one-hidden-layer softmax classifiers with analytic backward passes.
//!
//! Parameters live in one flat vector so that gradients, finite differences
//! and covariance estimates all index the same layout:
//!
//! * `linear`: `W` (`I x C`, row-major, `W[i * C + c]`), then `b` (`C`).
//! * `mlp1`: `W1` (`I x I`), `b1` (`I`), `W2` (`I x C`), `b2` (`C`), with a
//!   ReLU after the first affine map.
//!
//! The logits are `z_c = b_c + sum_i x_i W[i, c]`.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::losses::{LossSpec, MixWeights};
use crate::math::{argmax, LogitVector, RandomSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp1,
}

impl Architecture {
    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::Mlp1 => "mlp1",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Architecture::Linear),
            "mlp1" => Ok(Architecture::Mlp1),
            _ => Err(invalid(format!("unknown architecture {s:?}"))),
        }
    }
}

/// Position of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

fn layer_shapes(arch: Architecture, input_dim: usize, classes: usize) -> Vec<LayerShape> {
    let dims: &[(usize, usize)] = match arch {
        Architecture::Linear => &[(input_dim, classes)],
        Architecture::Mlp1 => &[(input_dim, input_dim), (input_dim, classes)],
    };
    let mut offset = 0;
    dims.iter()
        .map(|&(rows, cols)| {
            let weights = offset..offset + rows * cols;
            let bias = weights.end..weights.end + cols;
            offset = bias.end;
            LayerShape {
                rows,
                cols,
                weights,
                bias,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    architecture: Architecture,
    input_dim: usize,
    classes: usize,
    params: Vec<f64>,
}

/// Gradient with the same layout as [`ClassifierModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    layers: Vec<LayerShape>,
    values: Vec<f64>,
}

impl GradientBundle {
    /// Flattened view of length `P`.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.values[self.layers[layer].weights.clone()]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.values[self.layers[layer].bias.clone()]
    }
}

fn check_dims(input_dim: usize, classes: usize) -> Result<()> {
    if input_dim == 0 {
        return Err(invalid("input dimension must be >= 1"));
    }
    if classes < 2 {
        return Err(invalid("a classifier needs at least 2 classes"));
    }
    Ok(())
}

impl ClassifierModel {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(architecture: Architecture, input_dim: usize, classes: usize, rng: &mut RandomSource) -> Result<Self> {
        let mut model = Self::zeros(architecture, input_dim, classes)?;
        for layer in model.layers() {
            let limit = (6.0 / (layer.rows + layer.cols) as f64).sqrt();
            for w in &mut model.params[layer.weights] {
                *w = rng.uniform_range(-limit, limit);
            }
        }
        Ok(model)
    }

    pub fn zeros(architecture: Architecture, input_dim: usize, classes: usize) -> Result<Self> {
        check_dims(input_dim, classes)?;
        let count = param_count(architecture, input_dim, classes);
        Ok(Self {
            architecture,
            input_dim,
            classes,
            params: vec![0.0; count],
        })
    }

    pub fn from_params(architecture: Architecture, input_dim: usize, classes: usize, params: Vec<f64>) -> Result<Self> {
        check_dims(input_dim, classes)?;
        let expected = param_count(architecture, input_dim, classes);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "model parameters",
                expected,
                found: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            architecture,
            input_dim,
            classes,
            params,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        layer_shapes(self.architecture, self.input_dim, self.classes)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "model input",
                expected: self.input_dim,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(())
    }

    /// `out_c = b_c + sum_i x_i W[i, c]` for one layer.
    fn affine(&self, layer: &LayerShape, x: &[f64]) -> Vec<f64> {
        let w = &self.params[layer.weights.clone()];
        let mut out = self.params[layer.bias.clone()].to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w[i * layer.cols..(i + 1) * layer.cols];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        out
    }

    /// Hidden pre-activations (mlp1 only) and logits.
    fn forward_parts(&self, x: &[f64]) -> (Option<Vec<f64>>, Vec<f64>) {
        let layers = self.layers();
        match self.architecture {
            Architecture::Linear => (None, self.affine(&layers[0], x)),
            Architecture::Mlp1 => {
                let pre = self.affine(&layers[0], x);
                let hidden: Vec<f64> = pre.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
                let logits = self.affine(&layers[1], &hidden);
                (Some(pre), logits)
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<LogitVector> {
        self.check_input(x)?;
        LogitVector::new(self.forward_parts(x).1)
    }

    /// Mixed-loss value and its exact parameter gradient for one sample.
    pub fn backward(&self, x: &[f64], y: usize, w: MixWeights) -> Result<(f64, GradientBundle)> {
        self.backward_loss(x, y, &LossSpec::from(w))
    }

    /// Like [`ClassifierModel::backward`] for any loss with a logit gradient.
    /// The ReLU derivative at exactly zero is taken as zero.
    pub fn backward_loss(&self, x: &[f64], y: usize, loss: &LossSpec) -> Result<(f64, GradientBundle)> {
        self.check_input(x)?;
        if y >= self.classes {
            return Err(Error::ClassOutOfRange {
                label: y,
                classes: self.classes,
            });
        }
        let (pre, logits) = self.forward_parts(x);
        let eval = loss.eval(&LogitVector::new(logits)?, y)?;
        let dz = &eval.grad_logits;

        let layers = self.layers();
        let mut grad = vec![0.0; self.params.len()];
        match pre {
            None => outer_into(&mut grad, &layers[0], x, dz),
            Some(pre) => {
                let hidden: Vec<f64> = pre.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
                outer_into(&mut grad, &layers[1], &hidden, dz);
                let w2 = &self.params[layers[1].weights.clone()];
                let dpre: Vec<f64> = pre
                    .iter()
                    .enumerate()
                    .map(|(h, &a)| {
                        if a > 0.0 {
                            let row = &w2[h * layers[1].cols..(h + 1) * layers[1].cols];
                            row.iter().zip(dz).map(|(w, d)| w * d).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                outer_into(&mut grad, &layers[0], x, &dpre);
            }
        }
        Ok((eval.value, GradientBundle { layers, values: grad }))
    }

    /// Argmax of the logits; the lowest index wins ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(self.forward(x)?.as_slice()))
    }

    /// Exact fraction of correctly classified samples.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let mut correct = 0usize;
        for (x, y) in data.iter() {
            if self.predict(x)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Text checkpoint, see [`ClassifierModel::from_checkpoint`] for the layout.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "architecture {}", self.architecture.as_str());
        let _ = writeln!(out, "input_dim {}", self.input_dim);
        let _ = writeln!(out, "classes {}", self.classes);
        let _ = writeln!(out, "parameters {}", self.params.len());
        for v in &self.params {
            let _ = writeln!(out, "{v:?}");
        }
        out
    }

    /// Parses a checkpoint:
    ///
    /// ```text
    /// elmix-checkpoint 1
    /// architecture <linear|mlp1>
    /// input_dim <I>
    /// classes <C>
    /// parameters <P>
    /// <P lines, one parameter each, in flat layout order, shortest round-trip decimal>
    /// ```
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| invalid(format!("checkpoint truncated before {what}")))
        };
        let header = next("header")?;
        if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(invalid(format!("unsupported checkpoint header {header:?}")));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| invalid(format!("expected {key:?}, found {line:?}")))
        };
        let arch: Architecture = field(next("architecture")?, "architecture")?.parse()?;
        let parse_usize = |s: String| s.parse::<usize>().map_err(|e| invalid(e.to_string()));
        let input_dim = parse_usize(field(next("input_dim")?, "input_dim")?)?;
        let classes = parse_usize(field(next("classes")?, "classes")?)?;
        let count = parse_usize(field(next("parameters")?, "parameters")?)?;
        let params = (0..count)
            .map(|_| {
                let line = next("parameter values")?;
                line.parse::<f64>()
                    .map_err(|_| invalid(format!("bad parameter value {line:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(arch, input_dim, classes, params)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

const CHECKPOINT_MAGIC: &str = "elmix-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

fn param_count(arch: Architecture, input_dim: usize, classes: usize) -> usize {
    layer_shapes(arch, input_dim, classes).last().map_or(0, |l| l.bias.end)
}

/// `dW[i, c] += input_i * delta_c`, `db += delta`.
fn outer_into(grad: &mut [f64], layer: &LayerShape, input: &[f64], delta: &[f64]) {
    let w = &mut grad[layer.weights.clone()];
    for (i, &xi) in input.iter().enumerate() {
        let row = &mut w[i * layer.cols..(i + 1) * layer.cols];
        for (g, &d) in row.iter_mut().zip(delta) {
            *g += xi * d;
        }
    }
    for (g, &d) in grad[layer.bias.clone()].iter_mut().zip(delta) {
        *g += d;
    }
}
