//! A small two-branch multimodal classifier standing in for the edited
//! model, with additive edit deltas and an ω hook on the last hidden state.
//!
//! ```text
//! m ─ img.w1 ─ relu ─ img.w2 ─ relu ─┐
//!                                     ├─ concat ─ fusion ─ h ─ (1+ω)·h ─ head ─ logits
//! x ─ txt.w1 ─ relu ─ txt.w2 ─ relu ─┘
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamSet, Role};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_img: usize,
    pub d_txt: usize,
    pub d_h: usize,
    pub n_classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_img: 16,
            d_txt: 16,
            d_h: 32,
            n_classes: 16,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_img", self.d_img),
            ("d_txt", self.d_txt),
            ("d_h", self.d_h),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    field: format!("model.{field}"),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Config {
                field: "model.n_classes".into(),
                reason: "need at least two classes".into(),
            });
        }
        Ok(())
    }

    /// `(name, [rows, cols])` for every weight, in a fixed order. Biases
    /// are `[cols]`.
    fn layer_shapes(&self) -> Vec<(Layer, usize, usize)> {
        vec![
            (Layer::ImageIn, self.d_img, self.d_h),
            (Layer::ImageOut, self.d_h, self.d_h),
            (Layer::TextIn, self.d_txt, self.d_h),
            (Layer::TextOut, self.d_h, self.d_h),
            (Layer::Fusion, 2 * self.d_h, self.d_h),
            (Layer::Head, self.d_h, self.n_classes),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(_, r, c)| r * c + c)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    ImageIn,
    ImageOut,
    TextIn,
    TextOut,
    Fusion,
    Head,
}

impl Layer {
    pub const ALL: [Layer; 6] = [
        Layer::ImageIn,
        Layer::ImageOut,
        Layer::TextIn,
        Layer::TextOut,
        Layer::Fusion,
        Layer::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::ImageIn => "img1",
            Layer::ImageOut => "img2",
            Layer::TextIn => "txt1",
            Layer::TextOut => "txt2",
            Layer::Fusion => "fusion",
            Layer::Head => "head",
        }
    }

    pub fn weight(self) -> String {
        format!("{}.weight", self.name())
    }

    pub fn bias(self) -> String {
        format!("{}.bias", self.name())
    }
}

/// The layers an edit is allowed to touch by default.
pub const DEFAULT_EDIT_LAYERS: [Layer; 2] = [Layer::Fusion, Layer::Head];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub dims: ModelDims,
    pub seed: u64,
    pub params: ParamSet,
}

/// Additive parameter change confined to a subset of layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditDelta {
    pub layers: Vec<Layer>,
    pub params: ParamSet,
}

/// One prompt: image features `m`, text features `x`, answer class `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptVec {
    pub m: Vec<f64>,
    pub x: Vec<f64>,
    pub y: usize,
}

/// A stack of prompts as `[n, d]` matrices.
#[derive(Clone, Debug)]
pub struct PromptBatch {
    pub m: Tensor,
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl PromptBatch {
    pub fn new(prompts: &[&PromptVec], dims: &ModelDims) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Empty("prompt batch"));
        }
        for p in prompts {
            if p.m.len() != dims.d_img || p.x.len() != dims.d_txt {
                return Err(Error::Dimension(format!(
                    "prompt has m:{} x:{}, model expects m:{} x:{}",
                    p.m.len(),
                    p.x.len(),
                    dims.d_img,
                    dims.d_txt
                )));
            }
            if p.y >= dims.n_classes {
                return Err(Error::Dimension(format!(
                    "class {} outside [0, {})",
                    p.y, dims.n_classes
                )));
            }
        }
        let m: Vec<Vec<f64>> = prompts.iter().map(|p| p.m.clone()).collect();
        let x: Vec<Vec<f64>> = prompts.iter().map(|p| p.x.clone()).collect();
        Ok(PromptBatch {
            m: Tensor::from_rows(&m)?,
            x: Tensor::from_rows(&x)?,
            y: prompts.iter().map(|p| p.y).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Distribution of the environment scalar ω.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OmegaDist {
    Uniform { low: f64, high: f64 },
}

impl Default for OmegaDist {
    fn default() -> Self {
        OmegaDist::Uniform {
            low: -0.9,
            high: 0.1,
        }
    }
}

/// How ω draws are produced for an expectation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaSampling {
    /// i.i.d. draws from a seeded generator.
    #[default]
    MonteCarlo,
    /// Deterministic midpoint-rule nodes; exact for integrands linear in ω.
    Midpoint,
}

impl OmegaDist {
    pub fn validate(&self) -> Result<()> {
        let OmegaDist::Uniform { low, high } = *self;
        if !(low.is_finite() && high.is_finite() && low < high) {
            return Err(Error::Config {
                field: "omega".into(),
                reason: format!("uniform bounds must satisfy low < high, got [{low}, {high}]"),
            });
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        let OmegaDist::Uniform { low, high } = *self;
        0.5 * (low + high)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let OmegaDist::Uniform { low, high } = *self;
        rng.random_range(low..high)
    }

    /// `n` values drawn according to `scheme`; deterministic given `seed`.
    pub fn samples(&self, n: usize, seed: u64, scheme: OmegaSampling) -> Vec<f64> {
        let OmegaDist::Uniform { low, high } = *self;
        match scheme {
            OmegaSampling::MonteCarlo => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| self.sample(&mut rng)).collect()
            }
            OmegaSampling::Midpoint => {
                let w = (high - low) / n as f64;
                (0..n).map(|i| low + (i as f64 + 0.5) * w).collect()
            }
        }
    }

    /// `n` evenly spaced points covering both endpoints (`n >= 2`).
    pub fn grid(&self, n: usize) -> Vec<f64> {
        let OmegaDist::Uniform { low, high } = *self;
        let n = n.max(2);
        (0..n)
            .map(|i| low + (high - low) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Uniform fan-in initialisation: weights in `±1/sqrt(fan_in)`, zero biases.
pub fn init_model(dims: ModelDims, seed: u64) -> Result<ToyModel> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new(Role::Base);
    for (layer, rows, cols) in dims.layer_shapes() {
        let bound = (6.0 / rows as f64).sqrt();
        let w = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params.insert(&layer.weight(), Tensor::matrix(rows, cols, w)?)?;
        params.insert(&layer.bias(), Tensor::zeros(&[cols]))?;
    }
    Ok(ToyModel { dims, seed, params })
}

impl EditDelta {
    /// All-zero delta on `layers`.
    pub fn zeros(model: &ToyModel, layers: &[Layer]) -> EditDelta {
        let mut params = ParamSet::new(Role::Edit);
        let mut layers = layers.to_vec();
        layers.sort();
        layers.dedup();
        for layer in &layers {
            for name in [layer.weight(), layer.bias()] {
                let base = model.params.get(&name).expect("layer present in model");
                params
                    .insert(&name, Tensor::zeros_like(base))
                    .expect("unique layer names");
            }
        }
        EditDelta { layers, params }
    }

    pub fn is_zero(&self) -> bool {
        self.params
            .iter()
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.params.names().cloned().collect()
    }
}

/// The model's effective layer weights on one graph.
pub struct BoundModel<'g> {
    pub dims: ModelDims,
    weights: BTreeMap<String, Var<'g>>,
    /// The delta leaves, when bound as trainable.
    pub delta_vars: BTreeMap<String, Var<'g>>,
}

impl ToyModel {
    /// Binds base weights as constants and adds `delta` on top. With
    /// `trainable`, the delta tensors are named leaves `edit.<layer>.*`.
    pub fn bind<'g>(&self, g: &'g Graph, delta: &EditDelta, trainable: bool) -> Result<BoundModel<'g>> {
        let delta_vars = if trainable {
            delta.params.bind(g)?
        } else {
            delta.params.bind_const(g)
        };
        self.bind_with(g, &delta_vars)
    }

    /// Binds base weights plus caller-supplied delta nodes.
    pub fn bind_with<'g>(
        &self,
        g: &'g Graph,
        delta_vars: &BTreeMap<String, Var<'g>>,
    ) -> Result<BoundModel<'g>> {
        let mut weights = BTreeMap::new();
        for (name, base) in self.params.iter() {
            let base = g.constant(base.clone());
            let w = match delta_vars.get(name) {
                Some(d) => base.add(*d)?,
                None => base,
            };
            weights.insert(name.clone(), w);
        }
        Ok(BoundModel {
            dims: self.dims,
            weights,
            delta_vars: delta_vars.clone(),
        })
    }

    /// Logits for one prompt.
    pub fn forward(&self, delta: &EditDelta, omega: f64, prompt: &PromptVec) -> Result<Vec<f64>> {
        let logits = self.forward_batch(delta, omega, &[prompt])?;
        Ok(logits.row(0).to_vec())
    }

    /// `[n, V]` logits for a slice of prompts.
    pub fn forward_batch(&self, delta: &EditDelta, omega: f64, prompts: &[&PromptVec]) -> Result<Tensor> {
        let batch = PromptBatch::new(prompts, &self.dims)?;
        let g = Graph::new();
        let bound = self.bind(&g, delta, false)?;
        let h = bound.hidden(&batch)?;
        let w = g.scalar(omega);
        Ok(bound.logits(h, Some(w))?.value())
    }

    /// Pre-head hidden state without ω perturbation.
    pub fn last_hidden(&self, delta: &EditDelta, prompt: &PromptVec) -> Result<Vec<f64>> {
        Ok(self.last_hidden_batch(delta, &[prompt])?.row(0).to_vec())
    }

    pub fn last_hidden_batch(&self, delta: &EditDelta, prompts: &[&PromptVec]) -> Result<Tensor> {
        let batch = PromptBatch::new(prompts, &self.dims)?;
        let g = Graph::new();
        let bound = self.bind(&g, delta, false)?;
        Ok(bound.hidden(&batch)?.value())
    }

    pub fn predict(&self, delta: &EditDelta, prompt: &PromptVec) -> Result<usize> {
        Ok(predict_class(&self.forward(delta, 0.0, prompt)?))
    }

    pub fn predict_batch(&self, delta: &EditDelta, prompts: &[&PromptVec]) -> Result<Vec<usize>> {
        let logits = self.forward_batch(delta, 0.0, prompts)?;
        Ok((0..prompts.len())
            .map(|i| predict_class(logits.row(i)))
            .collect())
    }

    pub fn save_checkpoint(&self, delta: Option<&EditDelta>, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: self.dims,
            seed: self.seed,
            params: self.params.as_map().clone(),
            delta: delta.map(|d| DeltaRecord {
                layers: d.layers.clone(),
                params: d.params.as_map().clone(),
            }),
        };
        fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(ToyModel, Option<EditDelta>)> {
        let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config {
                field: "checkpoint.version".into(),
                reason: format!("unsupported version {}", ckpt.version),
            });
        }
        let model = ToyModel {
            dims: ckpt.dims,
            seed: ckpt.seed,
            params: ParamSet::from_map(Role::Base, ckpt.params),
        };
        let delta = ckpt.delta.map(|d| EditDelta {
            layers: d.layers,
            params: ParamSet::from_map(Role::Edit, d.params),
        });
        Ok((model, delta))
    }
}

/// Argmax with ties broken towards the lowest class index.
pub fn predict_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    dims: ModelDims,
    seed: u64,
    params: BTreeMap<String, Tensor>,
    delta: Option<DeltaRecord>,
}

#[derive(Serialize, Deserialize)]
struct DeltaRecord {
    layers: Vec<Layer>,
    params: BTreeMap<String, Tensor>,
}

impl<'g> BoundModel<'g> {
    fn linear(&self, input: Var<'g>, layer: Layer) -> Result<Var<'g>> {
        let w = self.weights[&layer.weight()];
        let b = self.weights[&layer.bias()];
        Ok(input.matmul(w)?.add_row(b)?)
    }

    pub fn weight(&self, name: &str) -> Option<Var<'g>> {
        self.weights.get(name).copied()
    }

    /// `[n, d_h]` last hidden states.
    pub fn hidden(&self, batch: &PromptBatch) -> Result<Var<'g>> {
        let g = self.weights[&Layer::Head.weight()].graph();
        let m = g.constant(batch.m.clone());
        let x = g.constant(batch.x.clone());
        let img = self.linear(m, Layer::ImageIn)?.relu()?;
        let img = self.linear(img, Layer::ImageOut)?.relu()?;
        let txt = self.linear(x, Layer::TextIn)?.relu()?;
        let txt = self.linear(txt, Layer::TextOut)?.relu()?;
        let joint = g.concat(&[img, txt])?;
        self.linear(joint, Layer::Fusion)
    }

    /// The ω-perturbed hidden state `(1 + ω)·h`; `None` leaves `h` as is.
    pub fn perturb(&self, h: Var<'g>, omega: Option<Var<'g>>) -> Result<Var<'g>> {
        match omega {
            Some(w) => Ok(h.scale(w.add_scalar(1.0)?)?),
            None => Ok(h),
        }
    }

    /// `[n, V]` logits from hidden states, applying ω first.
    pub fn logits(&self, h: Var<'g>, omega: Option<Var<'g>>) -> Result<Var<'g>> {
        let h = self.perturb(h, omega)?;
        self.linear(h, Layer::Head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(dims: &ModelDims, seed: u64) -> PromptVec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PromptVec {
            m: (0..dims.d_img).map(|_| rng.random_range(-1.0..1.0)).collect(),
            x: (0..dims.d_txt).map(|_| rng.random_range(-1.0..1.0)).collect(),
            y: 0,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let dims = ModelDims::default();
        let a = init_model(dims, 3).unwrap();
        let b = init_model(dims, 3).unwrap();
        let c = init_model(dims, 4).unwrap();
        assert_eq!(a, b);
        let dist: f64 = a
            .params
            .iter()
            .map(|(k, t)| {
                let o = c.params.get(k).unwrap();
                t.data().iter().zip(o.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            })
            .sum();
        assert!(dist > 0.0);
        assert_eq!(a.params.numel(), dims.param_count());
    }

    #[test]
    fn head_shape_follows_dims() {
        let dims = ModelDims {
            d_h: 8,
            n_classes: 4,
            ..ModelDims::default()
        };
        let m = init_model(dims, 0).unwrap();
        assert_eq!(m.params.get("head.weight").unwrap().shape(), &[8, 4]);
        assert!(m.params.get("head.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_degenerate_dims() {
        let dims = ModelDims {
            n_classes: 1,
            ..ModelDims::default()
        };
        assert!(init_model(dims, 0).is_err());
    }

    #[test]
    fn omega_minus_one_gives_uniform_softmax() {
        let dims = ModelDims::default();
        let m = init_model(dims, 1).unwrap();
        let d = EditDelta::zeros(&m, &DEFAULT_EDIT_LAYERS);
        let logits = m.forward(&d, -1.0, &prompt(&dims, 9)).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_shift_is_linear_in_omega() {
        let dims = ModelDims::default();
        let m = init_model(dims, 1).unwrap();
        let d = EditDelta::zeros(&m, &DEFAULT_EDIT_LAYERS);
        let p = prompt(&dims, 5);
        let l0 = m.forward(&d, 0.0, &p).unwrap();
        let l1 = m.forward(&d, 0.1, &p).unwrap();
        let l2 = m.forward(&d, 0.2, &p).unwrap();
        for k in 0..dims.n_classes {
            let r = (l2[k] - l0[k]) / (l1[k] - l0[k]);
            assert!((r - 2.0).abs() < 1e-12, "class {k}: ratio {r}");
        }
    }

    #[test]
    fn delta_changes_hidden_only_through_edit_layers() {
        let dims = ModelDims::default();
        let m = init_model(dims, 2).unwrap();
        let p = prompt(&dims, 11);
        let zero = EditDelta::zeros(&m, &DEFAULT_EDIT_LAYERS);
        let z0 = m.last_hidden(&zero, &p).unwrap();
        let mut nudged = zero.clone();
        nudged.params.get_mut("fusion.weight").unwrap().data_mut()[0] = 0.5;
        let z1 = m.last_hidden(&nudged, &p).unwrap();
        assert_ne!(z0, z1);
        assert!(nudged.params.names().all(|n| n.starts_with("fusion") || n.starts_with("head")));
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict_class(&[0.1, 0.9, 0.2]), 1);
        assert_eq!(predict_class(&[0.5, 0.5]), 0);
        assert_eq!(predict_class(&[0.0; 16]), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dims = ModelDims::default();
        let m = init_model(dims, 7).unwrap();
        let mut d = EditDelta::zeros(&m, &DEFAULT_EDIT_LAYERS);
        d.params.get_mut("head.bias").unwrap().data_mut()[3] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        m.save_checkpoint(Some(&d), &path).unwrap();
        let (m2, d2) = ToyModel::load_checkpoint(&path).unwrap();
        assert_eq!(m, m2);
        assert_eq!(Some(d), d2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dims() -> impl Strategy<Value = ModelDims> {
            (1usize..6, 1usize..6, 1usize..8, 2usize..6).prop_map(|(d_img, d_txt, d_h, n_classes)| ModelDims {
                d_img,
                d_txt,
                d_h,
                n_classes,
            })
        }

        fn unperturbed(model: &ToyModel, delta: &EditDelta, p: &PromptVec) -> Vec<f64> {
            let batch = PromptBatch::new(&[p], &model.dims).unwrap();
            let g = Graph::new();
            let bound = model.bind(&g, delta, false).unwrap();
            let h = bound.hidden(&batch).unwrap();
            bound.logits(h, None).unwrap().value().row(0).to_vec()
        }

        proptest! {
            #[test]
            fn zero_delta_is_the_base_model(dims in dims(), seed in 0u64..1000, p in 0u64..1000, omega in -0.9f64..0.1) {
                let model = init_model(dims, seed).unwrap();
                let prompt = prompt(&dims, p);
                let none = EditDelta::zeros(&model, &[]);
                for layers in [&DEFAULT_EDIT_LAYERS[..], &Layer::ALL[..]] {
                    let zero = EditDelta::zeros(&model, layers);
                    prop_assert_eq!(
                        model.forward(&zero, omega, &prompt).unwrap(),
                        model.forward(&none, omega, &prompt).unwrap()
                    );
                }
            }

            #[test]
            fn zero_omega_is_unperturbed(dims in dims(), seed in 0u64..1000, p in 0u64..1000) {
                let model = init_model(dims, seed).unwrap();
                let prompt = prompt(&dims, p);
                let delta = EditDelta::zeros(&model, &DEFAULT_EDIT_LAYERS);
                prop_assert_eq!(model.forward(&delta, 0.0, &prompt).unwrap(), unperturbed(&model, &delta, &prompt));
            }

            #[test]
            fn argmax_ignores_positive_rescaling(
                logits in prop::collection::vec(-5.0f64..5.0, 1..20), c in 0.01f64..100.0,
            ) {
                let scaled: Vec<f64> = logits.iter().map(|v| v * c).collect();
                prop_assert_eq!(predict_class(&scaled), predict_class(&logits));
            }
        }
    }
}
