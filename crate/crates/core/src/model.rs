//! ReLU multilayer perceptron with access to the pen-ultimate representation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[out × in]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// Affine layers with ReLU between them and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// Values of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub logits: Tensor,
    /// Input of the final affine layer; the raw input for a linear model.
    pub representation: Tensor,
}

/// Handles of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub representation: Var,
    /// `(weights, bias)` leaves, one pair per layer.
    pub params: Vec<(Var, Var)>,
}

impl MlpModel {
    /// Uniform initialization in `±√(6/fan_in)`, zero biases.
    pub fn init(input_dim: usize, hidden_dims: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden_dims.contains(&0) {
            return Err(Error::Contract(format!(
                "layer widths must be positive (input {input_dim}, hidden {hidden_dims:?}, classes {num_classes})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = Vec::with_capacity(hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden_dims);
        dims.push(num_classes);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weights = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Layer {
                    weights: Tensor::matrix(fan_out, fan_in, weights).expect("sized by construction"),
                    bias: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        Ok(MlpModel { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("a model needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            let (out, _) = l.weights.dims2("model")?;
            if l.bias.shape() != [out] {
                return Err(Error::dim("model", format!("layer {k} bias does not match {out} outputs")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::dim(
                    "model",
                    format!(
                        "layer {k} emits {} features but layer {} expects {}",
                        pair[0].fan_out(),
                        k + 1,
                        pair[1].fan_in()
                    ),
                ));
            }
        }
        Ok(MlpModel { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn representation_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_in()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in layer order: `w₀, b₀, w₁, b₁, …`.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    /// Records the forward pass of `x` on `tape`. Parameter leaves require
    /// gradients only when `param_grads` is set.
    pub fn forward_on(&self, tape: &mut Tape, x: Var, param_grads: bool) -> Result<ForwardVars> {
        let (_, cols) = tape.value(x).dims2("forward")?;
        if cols != self.input_dim() {
            return Err(Error::dim(
                "forward",
                format!("input has {cols} features, model expects {}", self.input_dim()),
            ));
        }
        let mut params = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let mut representation = x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weights.clone(), param_grads);
            let b = tape.leaf(layer.bias.clone(), param_grads);
            params.push((w, b));
            if k == last {
                representation = h;
            }
            h = tape.linear(h, w, b)?;
            if k != last {
                h = tape.relu(h)?;
            }
        }
        Ok(ForwardVars {
            logits: h,
            representation,
            params,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardResult> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.forward_on(&mut tape, xv, false)?;
        Ok(ForwardResult {
            logits: tape.value(vars.logits).clone(),
            representation: tape.value(vars.representation).clone(),
        })
    }

    /// Softmax probabilities, `[batch × num_classes]`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.forward(x)?.logits;
        let (n, c) = logits.dims2("predict_proba")?;
        Tensor::matrix(n, c, softmax_rows(logits.data(), c))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?.logits;
        let c = self.num_classes();
        Ok(logits.data().chunks(c).map(argmax).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            input_dim: self.input_dim(),
            num_classes: self.num_classes(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    out_dim: l.fan_out(),
                    in_dim: l.fan_in(),
                    weights: l.weights.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
            run_id: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                context: "checkpoint".into(),
                detail: format!("unknown format tag {:?}", ck.format),
            });
        }
        let layers = ck
            .layers
            .iter()
            .map(|l| {
                Ok(Layer {
                    weights: Tensor::matrix(l.out_dim, l.in_dim, l.weights.clone())?,
                    bias: Tensor::vector(l.bias.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = MlpModel::from_layers(layers)?;
        if model.input_dim() != ck.input_dim || model.num_classes() != ck.num_classes {
            return Err(Error::Parse {
                context: "checkpoint".into(),
                detail: "declared dimensions disagree with layer shapes".into(),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, run_id: Option<&str>) -> Result<()> {
        let mut ck = self.to_checkpoint();
        ck.run_id = run_id.map(str::to_string);
        let text = serde_json::to_string_pretty(&ck)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            detail: e.to_string(),
        })?;
        MlpModel::from_checkpoint(&ck)
    }
}

pub const CHECKPOINT_FORMAT: &str = "bat-lab/mlp-v1";

/// On-disk model: layer shapes and row-major parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros_model(input: usize, hidden: &[usize], classes: usize) -> MlpModel {
        let mut m = MlpModel::init(input, hidden, classes, 0).unwrap();
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    #[test]
    fn init_is_deterministic() {
        let a = MlpModel::init(2, &[8], 3, 1).unwrap();
        let b = MlpModel::init(2, &[8], 3, 1).unwrap();
        assert_eq!(a, b);
        let c = MlpModel::init(2, &[8], 3, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_bound() {
        let m = MlpModel::init(10, &[32, 16], 4, 9).unwrap();
        for l in m.layers() {
            let bound = (6.0 / l.fan_in() as f64).sqrt();
            assert!(l.weights.data().iter().all(|w| w.abs() <= bound));
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(MlpModel::init(0, &[], 2, 0), Err(Error::Contract(_))));
        assert!(matches!(MlpModel::init(2, &[0], 2, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_model_representation_is_input() {
        let m = MlpModel::init(3, &[], 2, 0).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let out = m.forward(&x).unwrap();
        assert_eq!(out.representation, x);
        assert_eq!(out.logits.shape(), &[2, 2]);
    }

    #[test]
    fn identity_linear_model_returns_input() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = MlpModel::from_layers(vec![Layer {
            weights: w,
            bias: Tensor::zeros(vec![2]),
        }])
        .unwrap();
        let x = Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap();
        assert_eq!(m.forward(&x).unwrap().logits.data(), &[0.3, 0.7]);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = zeros_model(3, &[5], 4);
        let x = Tensor::matrix(1, 3, vec![0.2, 0.5, 0.9]).unwrap();
        let p = m.predict_proba(&x).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
    }

    #[test]
    fn analytic_softmax() {
        let w = Tensor::matrix(2, 1, vec![2f64.ln(), 0.0]).unwrap();
        let m = MlpModel::from_layers(vec![Layer {
            weights: w,
            bias: Tensor::zeros(vec![2]),
        }])
        .unwrap();
        let p = m.predict_proba(&Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn representation_width_is_last_hidden() {
        let m = MlpModel::init(2, &[8], 3, 4).unwrap();
        let x = Tensor::matrix(5, 2, vec![0.5; 10]).unwrap();
        let out = m.forward(&x).unwrap();
        assert_eq!(out.representation.shape(), &[5, 8]);
        assert!(out.representation.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = MlpModel::init(2, &[8], 3, 4).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.5; 3]).unwrap();
        assert!(matches!(m.forward(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let a = Layer {
            weights: Tensor::zeros(vec![4, 2]),
            bias: Tensor::zeros(vec![4]),
        };
        let b = Layer {
            weights: Tensor::zeros(vec![3, 5]),
            bias: Tensor::zeros(vec![3]),
        };
        assert!(MlpModel::from_layers(vec![a, b]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = MlpModel::init(7, &[13, 5], 3, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path, Some("abc")).unwrap();
        let back = MlpModel::load(&path).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.params().zip(back.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
