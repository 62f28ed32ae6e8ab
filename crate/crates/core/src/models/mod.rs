//! MLP conditional-density estimators.
//!
//! A model is a stack of dense hidden layers followed by a head. Splitting at
//! `mix_layer = m` gives the feature extractor (input plus the first `m`
//! hidden layers) and the predictor (the remaining layers and the head).
//! Weights are stored `in × out` so a batch forward is `x · W + b`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::densities::expr::{CategoricalExpr, GaussianExpr};
use crate::densities::{CategoricalDensity, GaussianDensity, VARIANCE_FLOOR};
use crate::diffcore::{glorot_uniform, BoundParams, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    GaussianHeteroscedastic,
    GaussianHomoscedastic,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    Classification,
}

impl HeadKind {
    pub fn task(self) -> Task {
        match self {
            HeadKind::Softmax => Task::Classification,
            _ => Task::Regression,
        }
    }
}

/// How the embedding variance `σ²(x)` of `q(z | x)` is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbeddingVariance {
    /// An affine map off the trunk feeding the mix layer.
    Shared,
    /// One learned variance per embedding dimension.
    Homoscedastic,
    /// A separate one-hidden-layer network on the raw input, trained only
    /// through the variance path.
    Auxiliary { hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head: HeadKind,
    /// Response dimension, or class count for a softmax head.
    pub output_dim: usize,
    /// Number of hidden layers in the feature extractor.
    pub mix_layer: usize,
    #[serde(default)]
    pub embedding: Option<EmbeddingVariance>,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("input and output dimensions must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.mix_layer > self.hidden.len() {
            return Err(Error::MixLayer {
                layer: self.mix_layer,
                hidden: self.hidden.len(),
            });
        }
        if self.head == HeadKind::Softmax && self.output_dim < 2 {
            return Err(Error::invalid("softmax head needs at least two classes"));
        }
        if let Some(EmbeddingVariance::Auxiliary { hidden: 0 }) = self.embedding {
            return Err(Error::invalid("auxiliary variance network needs a positive width"));
        }
        Ok(())
    }

    /// Width of the activations after `layer` hidden layers.
    pub fn width_at(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden[layer - 1]
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.width_at(self.mix_layer)
    }

    pub fn task(&self) -> Task {
        self.head.task()
    }
}

#[derive(Clone, Debug)]
enum VarianceParams {
    Affine(ParamId, ParamId),
    Constant(ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    layers: Vec<(ParamId, ParamId)>,
    head_mean: (ParamId, ParamId),
    head_var: Option<VarianceParams>,
    embed_var: Option<VarianceParams>,
    aux: Option<[(ParamId, ParamId); 2]>,
}

fn param_shapes(spec: &MlpSpec) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut width = spec.input_dim;
    for (k, &h) in spec.hidden.iter().enumerate() {
        out.push((format!("layer{k}.w"), width, h));
        out.push((format!("layer{k}.b"), 1, h));
        width = h;
    }
    out.push(("head.mean.w".into(), width, spec.output_dim));
    out.push(("head.mean.b".into(), 1, spec.output_dim));
    match spec.head {
        HeadKind::GaussianHeteroscedastic => {
            out.push(("head.var.w".into(), width, spec.output_dim));
            out.push(("head.var.b".into(), 1, spec.output_dim));
        }
        HeadKind::GaussianHomoscedastic => out.push(("head.var.raw".into(), 1, spec.output_dim)),
        HeadKind::Softmax => {}
    }
    let dz = spec.embedding_dim();
    match spec.embedding {
        Some(EmbeddingVariance::Shared) => {
            let feed = spec.width_at(spec.mix_layer.saturating_sub(1));
            out.push(("embed.var.w".into(), feed, dz));
            out.push(("embed.var.b".into(), 1, dz));
        }
        Some(EmbeddingVariance::Homoscedastic) => out.push(("embed.var.raw".into(), 1, dz)),
        Some(EmbeddingVariance::Auxiliary { hidden }) => {
            out.push(("aux.0.w".into(), spec.input_dim, hidden));
            out.push(("aux.0.b".into(), 1, hidden));
            out.push(("aux.1.w".into(), hidden, dz));
            out.push(("aux.1.b".into(), 1, dz));
        }
        None => {}
    }
    out
}

impl Layout {
    fn resolve(spec: &MlpSpec, params: &ParamSet) -> Result<Self> {
        for (name, rows, cols) in param_shapes(spec) {
            match params.by_name(&name) {
                Some(m) if m.shape() == (rows, cols) => {}
                Some(m) => {
                    return Err(Error::Shape {
                        op: "parameter layout",
                        lhs: (rows, cols),
                        rhs: m.shape(),
                    })
                }
                None => return Err(Error::invalid(format!("missing parameter {name}"))),
            }
        }
        let id = |name: &str| params.id_of(name).expect("checked above");
        let pair = |prefix: &str| (id(&format!("{prefix}.w")), id(&format!("{prefix}.b")));
        let layers = (0..spec.hidden.len()).map(|k| pair(&format!("layer{k}"))).collect();
        let head_var = match spec.head {
            HeadKind::GaussianHeteroscedastic => Some(VarianceParams::Affine(id("head.var.w"), id("head.var.b"))),
            HeadKind::GaussianHomoscedastic => Some(VarianceParams::Constant(id("head.var.raw"))),
            HeadKind::Softmax => None,
        };
        let (embed_var, aux) = match spec.embedding {
            Some(EmbeddingVariance::Shared) => (Some(VarianceParams::Affine(id("embed.var.w"), id("embed.var.b"))), None),
            Some(EmbeddingVariance::Homoscedastic) => (Some(VarianceParams::Constant(id("embed.var.raw"))), None),
            Some(EmbeddingVariance::Auxiliary { .. }) => (None, Some([pair("aux.0"), pair("aux.1")])),
            None => (None, None),
        };
        Ok(Self {
            layers,
            head_mean: pair("head.mean"),
            head_var,
            embed_var,
            aux,
        })
    }
}

/// Output distribution of a batch, as tape expressions.
#[derive(Clone, Copy, Debug)]
pub enum OutputExpr {
    Gaussian(GaussianExpr),
    Categorical(CategoricalExpr),
}

/// Output distribution of a batch, as values.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Gaussian { mean: Matrix, var: Matrix },
    Categorical { logits: Matrix },
}

impl Prediction {
    fn from_expr(tape: &Tape, out: OutputExpr) -> Self {
        match out {
            OutputExpr::Gaussian(g) => Prediction::Gaussian {
                mean: tape.value(g.mean).clone(),
                var: tape.value(g.var).clone(),
            },
            OutputExpr::Categorical(c) => Prediction::Categorical {
                logits: tape.value(c.logits).clone(),
            },
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Prediction::Gaussian { mean, .. } => mean.rows(),
            Prediction::Categorical { logits } => logits.rows(),
        }
    }
}

/// Initial embedding variance of `q(z | x)`.
pub const EMBED_VAR_INIT: f64 = 0.1;

fn inverse_softplus(v: f64) -> f64 {
    v + (-(-v).exp_m1()).ln()
}

/// What the loss builders need from a conditional density model. Only
/// `forward` is required; the rest default to a model with no hidden layers
/// and no embedding distribution.
pub trait DensityModel {
    fn forward(&self, tape: &Tape, p: &BoundParams, x: Var) -> Result<OutputExpr>;

    fn features(&self, tape: &Tape, _p: &BoundParams, x: Var, layer: usize) -> Result<Var> {
        let _ = tape;
        match layer {
            0 => Ok(x),
            _ => Err(Error::MixLayer { layer, hidden: 0 }),
        }
    }

    fn decode(&self, tape: &Tape, p: &BoundParams, z: Var, layer: usize) -> Result<OutputExpr> {
        match layer {
            0 => self.forward(tape, p, z),
            _ => Err(Error::MixLayer { layer, hidden: 0 }),
        }
    }

    fn embedding(&self, _tape: &Tape, _p: &BoundParams, _x: Var) -> Result<GaussianExpr> {
        Err(Error::MissingHead("embedding distribution"))
    }

    /// The layer `q(z | x)` lives at, if the model has one.
    fn embedding_layer(&self) -> Option<usize> {
        None
    }

    fn auxiliary_variance(&self, _tape: &Tape, _p: &BoundParams, _x: Var) -> Result<Var> {
        Err(Error::MissingHead("auxiliary variance network"))
    }

    fn has_auxiliary(&self) -> bool {
        false
    }
}

/// The heteroscedastic cubic used in the worked example:
/// `y | x ~ N(x³, (x²/2 + 1)²)`. It has no parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct CubicGroundTruth;

impl DensityModel for CubicGroundTruth {
    fn forward(&self, tape: &Tape, _p: &BoundParams, x: Var) -> Result<OutputExpr> {
        let x2 = tape.square(x);
        let mean = tape.mul(x2, x)?;
        let sd = tape.offset(tape.scale(x2, 0.5), 1.0);
        let var = tape.square(sd);
        Ok(OutputExpr::Gaussian(GaussianExpr { mean, var }))
    }
}

/// A conditional density estimator: specification plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: MlpSpec,
    params: ParamSet,
    layout: Layout,
}

impl Model {
    /// Glorot-uniform weights and zero biases; embedding variances start
    /// at `EMBED_VAR_INIT`.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        Self::init_with_embedding_variance(spec, rng, EMBED_VAR_INIT)
    }

    /// As [`Model::init`], with embedding variances starting at `variance`.
    pub fn init_with_embedding_variance<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R, variance: f64) -> Result<Self> {
        if !(variance > VARIANCE_FLOOR && variance.is_finite()) {
            return Err(Error::invalid(format!("initial embedding variance {variance} must exceed {VARIANCE_FLOOR}")));
        }
        let raw = inverse_softplus(variance - VARIANCE_FLOOR);
        Self::build(spec, |name, rows, cols| {
            if name.ends_with(".w") {
                glorot_uniform(rng, rows, cols)
            } else if matches!(name, "embed.var.b" | "embed.var.raw" | "aux.1.b") {
                Matrix::filled(rows, cols, raw)
            } else {
                Matrix::zeros(rows, cols)
            }
        })
    }

    /// Every parameter zero.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        Self::build(spec, |_, rows, cols| Matrix::zeros(rows, cols))
    }

    fn build(spec: MlpSpec, mut fill: impl FnMut(&str, usize, usize) -> Matrix) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        for (name, rows, cols) in param_shapes(&spec) {
            let value = fill(&name, rows, cols);
            params.push(name, value);
        }
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: MlpSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::resolve(&spec, &params)?;
        Ok(Self { spec, params, layout })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces the named parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .params
            .id_of(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        let slot = self.params.get_mut(id);
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: slot.shape(),
                rhs: value.shape(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Whether a parameter belongs to the auxiliary variance network.
    pub fn is_auxiliary(name: &str) -> bool {
        name.starts_with("aux.")
    }

    pub fn task(&self) -> Task {
        self.spec.task()
    }

    fn activate(&self, tape: &Tape, v: Var) -> Var {
        match self.spec.activation {
            Activation::Tanh => tape.tanh(v),
            Activation::Relu => tape.relu(v),
        }
    }

    fn check_width(&self, tape: &Tape, v: Var, layer: usize) -> Result<()> {
        let cols = tape.value(v).cols();
        let expected = self.spec.width_at(layer);
        if cols != expected {
            return Err(Error::Dimension { expected, actual: cols });
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer > self.spec.hidden.len() {
            return Err(Error::MixLayer {
                layer,
                hidden: self.spec.hidden.len(),
            });
        }
        Ok(())
    }

    /// Activations after hidden layers `from+1 ..= to`, starting from `h`.
    pub fn layers(&self, tape: &Tape, p: &BoundParams, h: Var, from: usize, to: usize) -> Result<Var> {
        self.check_layer(to)?;
        self.check_width(tape, h, from)?;
        let mut h = h;
        for &(w, b) in &self.layout.layers[from..to] {
            let pre = tape.affine(h, p[w], Some(p[b]))?;
            h = self.activate(tape, pre);
        }
        Ok(h)
    }

    /// The feature extractor: activations after `layer` hidden layers.
    pub fn features(&self, tape: &Tape, p: &BoundParams, x: Var, layer: usize) -> Result<Var> {
        self.layers(tape, p, x, 0, layer)
    }

    /// The predictor: the output distribution given activations `z` after
    /// `layer` hidden layers.
    pub fn decode(&self, tape: &Tape, p: &BoundParams, z: Var, layer: usize) -> Result<OutputExpr> {
        let h = self.layers(tape, p, z, layer, self.spec.hidden.len())?;
        self.head(tape, p, h)
    }

    fn variance(&self, tape: &Tape, p: &BoundParams, v: &VarianceParams, h: Var, rows: usize, cols: usize) -> Result<Var> {
        let raw = match *v {
            VarianceParams::Affine(w, b) => tape.affine(h, p[w], Some(p[b]))?,
            VarianceParams::Constant(r) => tape.broadcast(p[r], rows, cols)?,
        };
        Ok(tape.offset(tape.softplus(raw), VARIANCE_FLOOR))
    }

    fn head(&self, tape: &Tape, p: &BoundParams, h: Var) -> Result<OutputExpr> {
        let (w, b) = self.layout.head_mean;
        let mean = tape.affine(h, p[w], Some(p[b]))?;
        match &self.layout.head_var {
            None => Ok(OutputExpr::Categorical(CategoricalExpr { logits: mean })),
            Some(v) => {
                let (rows, cols) = tape.value(mean).shape();
                let var = self.variance(tape, p, v, h, rows, cols)?;
                Ok(OutputExpr::Gaussian(GaussianExpr { mean, var }))
            }
        }
    }

    pub fn forward(&self, tape: &Tape, p: &BoundParams, x: Var) -> Result<OutputExpr> {
        let z = self.features(tape, p, x, self.spec.mix_layer)?;
        self.decode(tape, p, z, self.spec.mix_layer)
    }

    /// `q(z | x)` at the mix layer. For the auxiliary variant the variance
    /// comes from the auxiliary network.
    pub fn embedding(&self, tape: &Tape, p: &BoundParams, x: Var) -> Result<GaussianExpr> {
        let m = self.spec.mix_layer;
        let trunk = self.features(tape, p, x, m.saturating_sub(1))?;
        let mean = if m == 0 { trunk } else { self.layers(tape, p, trunk, m - 1, m)? };
        let (rows, cols) = tape.value(mean).shape();
        let var = match (&self.layout.embed_var, &self.layout.aux) {
            (Some(v), _) => self.variance(tape, p, v, trunk, rows, cols)?,
            (None, Some(_)) => self.auxiliary_variance(tape, p, x)?,
            (None, None) => return Err(Error::MissingHead("embedding distribution")),
        };
        Ok(GaussianExpr { mean, var })
    }

    /// The auxiliary embedding-variance network.
    pub fn auxiliary_variance(&self, tape: &Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let [(w0, b0), (w1, b1)] = self.layout.aux.ok_or(Error::MissingHead("auxiliary variance network"))?;
        self.check_width(tape, x, 0)?;
        let h = tape.tanh(tape.affine(x, p[w0], Some(p[b0]))?);
        let raw = tape.affine(h, p[w1], Some(p[b1]))?;
        Ok(tape.offset(tape.softplus(raw), VARIANCE_FLOOR))
    }

    pub fn has_embedding(&self) -> bool {
        self.spec.embedding.is_some()
    }

    pub fn has_auxiliary(&self) -> bool {
        self.layout.aux.is_some()
    }

    fn with_frozen<T>(&self, f: impl FnOnce(&Tape, &BoundParams) -> Result<T>) -> Result<T> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        f(&tape, &p)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Prediction> {
        self.with_frozen(|t, p| {
            let out = self.forward(t, p, t.constant(x.clone()))?;
            Ok(Prediction::from_expr(t, out))
        })
    }

    pub fn forward_regression(&self, x: &Matrix) -> Result<Vec<GaussianDensity>> {
        match self.predict(x)? {
            Prediction::Gaussian { mean, var } => gaussians(&mean, &var),
            Prediction::Categorical { .. } => Err(Error::invalid("model has a classification head")),
        }
    }

    pub fn forward_classification(&self, x: &Matrix) -> Result<Vec<CategoricalDensity>> {
        match self.predict(x)? {
            Prediction::Categorical { logits } => (0..logits.rows())
                .map(|r| CategoricalDensity::from_logits(logits.row(r).to_vec()))
                .collect(),
            Prediction::Gaussian { .. } => Err(Error::invalid("model has a regression head")),
        }
    }

    pub fn encode_distribution(&self, x: &Matrix) -> Result<Vec<GaussianDensity>> {
        self.with_frozen(|t, p| {
            let q = self.embedding(t, p, t.constant(x.clone()))?;
            gaussians(&t.value(q.mean), &t.value(q.var))
        })
    }

    /// Splits the forward pass after `layer` hidden layers.
    pub fn split_forward(&self, x: &Matrix, layer: usize) -> Result<(Matrix, Continuation<'_>)> {
        self.check_layer(layer)?;
        let z = self.with_frozen(|t, p| {
            let z = self.features(t, p, t.constant(x.clone()), layer)?;
            let value = t.value(z).clone();
            Ok(value)
        })?;
        Ok((z, Continuation { model: self, layer }))
    }

    /// Decodes given embeddings with the predictor.
    pub fn decode_values(&self, z: &Matrix, layer: usize) -> Result<Prediction> {
        self.with_frozen(|t, p| {
            let out = self.decode(t, p, t.constant(z.clone()), layer)?;
            Ok(Prediction::from_expr(t, out))
        })
    }
}

fn gaussians(mean: &Matrix, var: &Matrix) -> Result<Vec<GaussianDensity>> {
    (0..mean.rows())
        .map(|r| GaussianDensity::new(mean.row(r).to_vec(), var.row(r).to_vec()))
        .collect()
}

/// The predictor half of a split model.
pub struct Continuation<'a> {
    model: &'a Model,
    layer: usize,
}

impl Continuation<'_> {
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn apply(&self, z: &Matrix) -> Result<Prediction> {
        self.model.decode_values(z, self.layer)
    }

    pub fn apply_expr(&self, tape: &Tape, p: &BoundParams, z: Var) -> Result<OutputExpr> {
        self.model.decode(tape, p, z, self.layer)
    }
}

/// A model with no hidden layers: `f(x) = A x + b`, with `A: out × in`.
pub fn build_affine_model(a: &Matrix, b: &[f64], head: HeadKind) -> Result<Model> {
    if a.rows() != b.len() {
        return Err(Error::Shape {
            op: "build_affine_model",
            lhs: a.shape(),
            rhs: (b.len(), 1),
        });
    }
    let spec = MlpSpec {
        input_dim: a.cols(),
        hidden: Vec::new(),
        activation: Activation::Tanh,
        head,
        output_dim: a.rows(),
        mix_layer: 0,
        embedding: None,
    };
    let mut model = Model::zeros(spec)?;
    model.set_param("head.mean.w", a.transpose())?;
    model.set_param("head.mean.b", Matrix::row_vector(b))?;
    Ok(model)
}

impl DensityModel for Model {
    fn forward(&self, tape: &Tape, p: &BoundParams, x: Var) -> Result<OutputExpr> {
        Model::forward(self, tape, p, x)
    }

    fn features(&self, tape: &Tape, p: &BoundParams, x: Var, layer: usize) -> Result<Var> {
        Model::features(self, tape, p, x, layer)
    }

    fn decode(&self, tape: &Tape, p: &BoundParams, z: Var, layer: usize) -> Result<OutputExpr> {
        Model::decode(self, tape, p, z, layer)
    }

    fn embedding(&self, tape: &Tape, p: &BoundParams, x: Var) -> Result<GaussianExpr> {
        Model::embedding(self, tape, p, x)
    }

    fn embedding_layer(&self) -> Option<usize> {
        self.spec.embedding.map(|_| self.spec.mix_layer)
    }

    fn auxiliary_variance(&self, tape: &Tape, p: &BoundParams, x: Var) -> Result<Var> {
        Model::auxiliary_variance(self, tape, p, x)
    }

    fn has_auxiliary(&self) -> bool {
        Model::has_auxiliary(self)
    }
}
