//! Desk-scale mixture-of-experts network `f(x, omega)`.
//!
//! Every token flows independently through `L` residual MoE layers:
//!
//! ```text
//! h_{l+1} = h_l + sum_{e in topk} w_e * W2_{l,e} tanh(W1_{l,e} h_l)
//! ```
//!
//! where the routing row is either the router's `softmax(R_l h_l)` or an
//! override taken from a pathway. Class logits are read out from the last
//! token's final hidden state, so only the last token's pathway influences the
//! prediction.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::hex64;
use crate::pathway::{
    sparsify_topk, OptimizationMask, Pathway, PathwayDims,
    RoutingConfig, SparsePathway, SparseRow,
};

/// A `T x d_model` matrix; row `t` is token `t`.
pub type Input = DMatrix<f64>;

/// Two-layer tanh MLP: `W2 tanh(W1 h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub w1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_classes: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d_model: 16,
            d_hidden: 8,
            n_classes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub config: RoutingConfig,
    pub shape: ModelShape,
    /// One `E x d` router per layer.
    pub routers: Vec<DMatrix<f64>>,
    /// `experts[l][e]`.
    pub experts: Vec<Vec<Expert>>,
    /// `C x d` readout.
    pub readout: DMatrix<f64>,
}

/// Everything the backward pass needs from one layer of one token.
struct LayerTape {
    /// Dense routing row actually used (router softmax or override).
    row: Vec<f64>,
    from_router: bool,
    sparse: SparseRow,
    activations: Vec<DVector<f64>>,
    outputs: Vec<DVector<f64>>,
}

struct TokenTape {
    layers: Vec<LayerTape>,
    hidden: DVector<f64>,
}

type Override<'a> = Option<(&'a Pathway, &'a OptimizationMask)>;

impl MoeModel {
    /// Random model with Gaussian parameters; routers included.
    pub fn random(seed: u64, config: RoutingConfig, shape: ModelShape) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.d_model;
        let routers = (0..config.n_layers)
            .map(|_| gaussian_matrix(&mut rng, config.n_experts, d, 1.0 / (d as f64).sqrt()))
            .collect();
        let experts = random_experts(&mut rng, config, shape, 1.0, &vec![1.0; config.n_layers]);
        let readout = gaussian_matrix(&mut rng, shape.n_classes, d, 1.0 / (d as f64).sqrt());
        let model = Self {
            config,
            shape,
            routers,
            experts,
            readout,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn dims(&self) -> PathwayDims {
        self.config.dims()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (d, h, c) = (self.shape.d_model, self.shape.d_hidden, self.shape.n_classes);
        let (l, e) = (self.config.n_layers, self.config.n_experts);
        check_dim("router count", l, self.routers.len())?;
        check_dim("expert layers", l, self.experts.len())?;
        for r in &self.routers {
            check_dim("router rows", e, r.nrows())?;
            check_dim("router cols", d, r.ncols())?;
        }
        for layer in &self.experts {
            check_dim("experts per layer", e, layer.len())?;
            for x in layer {
                check_dim("expert w1 rows", h, x.w1.nrows())?;
                check_dim("expert w1 cols", d, x.w1.ncols())?;
                check_dim("expert w2 rows", d, x.w2.nrows())?;
                check_dim("expert w2 cols", h, x.w2.ncols())?;
            }
        }
        check_dim("readout rows", c, self.readout.nrows())?;
        check_dim("readout cols", d, self.readout.ncols())?;
        let all_finite = self.routers.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.readout.iter().all(|v| v.is_finite())
            && self
                .experts
                .iter()
                .flatten()
                .all(|x| x.w1.iter().chain(x.w2.iter()).all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::Numeric("model has non-finite parameters".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Input) -> Result<()> {
        check_dim("input tokens", self.config.n_tokens, x.nrows())?;
        check_dim("input width", self.shape.d_model, x.ncols())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input".into()));
        }
        Ok(())
    }

    fn check_override(&self, over: Override<'_>) -> Result<()> {
        if let Some((omega, mask)) = over {
            let (want, got, m) = (self.dims(), omega.dims(), mask.dims());
            check_dim("pathway tokens", want.tokens, got.tokens)?;
            check_dim("pathway layers", want.layers, got.layers)?;
            check_dim("pathway experts", want.experts, got.experts)?;
            check_dim("mask tokens", want.tokens, m.tokens)?;
            check_dim("mask layers", want.layers, m.layers)?;
            check_dim("mask experts", want.experts, m.experts)?;
        }
        Ok(())
    }

    fn run_token(&self, x: &Input, token: usize, over: Override<'_>) -> Result<TokenTape> {
        let mut h: DVector<f64> = x.row(token).transpose();
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let overridden = over.filter(|(_, mask)| mask.contains_row(token, l));
            let (row, from_router) = match overridden {
                Some((omega, _)) => (omega.row(token, l).to_vec(), false),
                None => (softmax(&(&self.routers[l] * &h))?, true),
            };
            let sparse = sparsify_topk(&row, self.config.top_k)?;
            let mut next = h.clone();
            let mut activations = Vec::with_capacity(sparse.experts.len());
            let mut outputs = Vec::with_capacity(sparse.experts.len());
            for (&e, &w) in sparse.experts.iter().zip(&sparse.weights) {
                let expert = &self.experts[l][e];
                let a = (&expert.w1 * &h).map(f64::tanh);
                let out = &expert.w2 * &a;
                next.axpy(w, &out, 1.0);
                activations.push(a);
                outputs.push(out);
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite hidden state at token {token}, layer {l}"
                )));
            }
            layers.push(LayerTape {
                row,
                from_router,
                sparse,
                activations,
                outputs,
            });
            h = next;
        }
        Ok(TokenTape { layers, hidden: h })
    }

    fn readout(&self, hidden: &DVector<f64>) -> DVector<f64> {
        &self.readout * hidden
    }

    fn forward_impl(&self, x: &Input, over: Override<'_>) -> Result<(DVector<f64>, SparsePathway, Pathway)> {
        self.check_input(x)?;
        self.check_override(over)?;
        let dims = self.dims();
        let mut used = SparsePathway::with_capacity(dims, self.config.top_k);
        let mut dense = Pathway::zeros(dims);
        let mut last = None;
        for t in 0..dims.tokens {
            let tape = self.run_token(x, t, over)?;
            for (l, layer) in tape.layers.iter().enumerate() {
                used.push_row(&layer.sparse);
                dense.row_mut(t, l).copy_from_slice(&layer.row);
            }
            last = Some(tape.hidden);
        }
        let logits = self.readout(&last.expect("n_tokens >= 1"));
        Ok((logits, used, dense))
    }

    /// Router pathway for `x`: `softmax(R_l h_{t,l})` for every token and layer.
    pub fn route(&self, x: &Input) -> Result<Pathway> {
        Ok(self.forward_impl(x, None)?.2)
    }

    /// Logits under the router's own pathway, plus that pathway.
    pub fn forward_base(&self, x: &Input) -> Result<(DVector<f64>, Pathway)> {
        let (logits, _, dense) = self.forward_impl(x, None)?;
        Ok((logits, dense))
    }

    /// Logits when the rows of `omega` replace the router's rows at every
    /// `(token, layer)` covered by `mask`; also returns the sparsified
    /// routing actually used.
    pub fn forward_with_pathway(
        &self,
        x: &Input,
        omega: &Pathway,
        mask: &OptimizationMask,
    ) -> Result<(DVector<f64>, SparsePathway)> {
        let (logits, used, _) = self.forward_impl(x, Some((omega, mask)))?;
        Ok((logits, used))
    }

    /// Logits only; skips every token but the last.
    pub fn logits_with_pathway(
        &self,
        x: &Input,
        omega: &Pathway,
        mask: &OptimizationMask,
    ) -> Result<DVector<f64>> {
        self.check_input(x)?;
        self.check_override(Some((omega, mask)))?;
        let tape = self.run_token(x, self.config.n_tokens - 1, Some((omega, mask)))?;
        Ok(self.readout(&tape.hidden))
    }

    pub fn predict(&self, x: &Input, omega: &Pathway, mask: &OptimizationMask) -> Result<usize> {
        Ok(argmax(self.logits_with_pathway(x, omega, mask)?.as_slice()))
    }

    pub fn predict_base(&self, x: &Input) -> Result<usize> {
        self.check_input(x)?;
        let tape = self.run_token(x, self.config.n_tokens - 1, None)?;
        Ok(argmax(self.readout(&tape.hidden).as_slice()))
    }

    /// Loss of `f(x, omega)` at `label` and its exact gradient with respect to
    /// the masked entries of `omega`.
    ///
    /// The top-k support of every row is held at its forward-pass selection;
    /// the derivative flows through the clamp-and-renormalize step, the
    /// experts, the residual stream and the softmax of any router row that is
    /// not overridden.
    pub fn loss_and_grad(
        &self,
        x: &Input,
        label: usize,
        omega: &Pathway,
        mask: &OptimizationMask,
    ) -> Result<(f64, Pathway)> {
        self.check_input(x)?;
        self.check_override(Some((omega, mask)))?;
        let token = self.config.n_tokens - 1;
        let tape = self.run_token(x, token, Some((omega, mask)))?;
        let logits = self.readout(&tape.hidden);
        let value = loss(logits.as_slice(), label)?;

        let mut dlogits = DVector::from_vec(softmax_vec(logits.as_slice()));
        dlogits[label] -= 1.0;
        let mut dh = self.readout.tr_mul(&dlogits);

        let dims = self.dims();
        let mut grad = Pathway::zeros(dims);
        let masked_row_index = |l: usize| -> Option<usize> {
            let ti = mask.tokens().iter().position(|&t| t == token)?;
            let li = mask.layers().iter().position(|&m| m == l)?;
            Some(ti * mask.layers().len() + li)
        };

        for l in (0..self.config.n_layers).rev() {
            let layer = &tape.layers[l];
            let mut dh_in = dh.clone();
            let mut dw = Vec::with_capacity(layer.sparse.experts.len());
            for (i, (&e, &w)) in layer.sparse.experts.iter().zip(&layer.sparse.weights).enumerate() {
                dw.push(dh.dot(&layer.outputs[i]));
                let expert = &self.experts[l][e];
                let mut da = expert.w2.tr_mul(&dh);
                da.component_mul_assign(&layer.activations[i].map(|a| 1.0 - a * a));
                dh_in.axpy(w, &expert.w1.tr_mul(&da), 1.0);
            }

            let drow = renormalization_backward(&layer.row, &layer.sparse, &dw);
            if layer.from_router {
                let p = &layer.row;
                let inner: f64 = p.iter().zip(&drow).map(|(a, b)| a * b).sum();
                let dz = DVector::from_iterator(p.len(), p.iter().zip(&drow).map(|(pe, de)| pe * (de - inner)));
                dh_in += self.routers[l].tr_mul(&dz);
            } else if let Some(ri) = masked_row_index(l) {
                for &e in mask.core_experts(ri) {
                    grad.set(token, l, e, drow[e]);
                }
            }
            dh = dh_in;
        }
        if grad.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite pathway gradient".into()));
        }
        Ok((value, grad))
    }

    /// Gradient of the loss with respect to the masked entries of `omega`.
    pub fn grad_pathway(
        &self,
        x: &Input,
        label: usize,
        omega: &Pathway,
        mask: &OptimizationMask,
    ) -> Result<Pathway> {
        Ok(self.loss_and_grad(x, label, omega, mask)?.1)
    }

    /// Central finite differences of the loss over every masked entry.
    pub fn finite_diff_grad(
        &self,
        x: &Input,
        label: usize,
        omega: &Pathway,
        mask: &OptimizationMask,
        step: f64,
    ) -> Result<Pathway> {
        if !(step > 0.0) {
            return Err(Error::InvalidSpec(format!("finite-difference step must be > 0, got {step}")));
        }
        let mut grad = Pathway::zeros(omega.dims());
        let mut probe = omega.clone();
        for &i in mask.entries() {
            let orig = omega.values()[i];
            probe.values_mut()[i] = orig + step;
            let up = loss(self.forward_with_pathway(x, &probe, mask)?.0.as_slice(), label)?;
            probe.values_mut()[i] = orig - step;
            let down = loss(self.forward_with_pathway(x, &probe, mask)?.0.as_slice(), label)?;
            probe.values_mut()[i] = orig;
            grad.values_mut()[i] = (up - down) / (2.0 * step);
        }
        Ok(grad)
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn forward_macs(config: &RoutingConfig, shape: &ModelShape) -> u64 {
        let (t, l, e, k) = (
            config.n_tokens as u64,
            config.n_layers as u64,
            config.n_experts as u64,
            config.top_k as u64,
        );
        let (d, h, c) = (shape.d_model as u64, shape.d_hidden as u64, shape.n_classes as u64);
        t * l * (e * d + k * 2 * h * d) + c * d
    }
}

/// `d loss / d row` given `d loss / d weight` on the support, with the
/// support held fixed. Entries clamped to zero and the uniform fallback carry
/// no gradient.
fn renormalization_backward(row: &[f64], sparse: &SparseRow, dw: &[f64]) -> Vec<f64> {
    let mut drow = vec![0.0; row.len()];
    let total: f64 = sparse.experts.iter().map(|&e| row[e].max(0.0)).sum();
    if total <= 0.0 {
        return drow;
    }
    let inner: f64 = sparse.weights.iter().zip(dw).map(|(w, g)| w * g).sum();
    for (i, &e) in sparse.experts.iter().enumerate() {
        if row[e] > 0.0 {
            drow[e] = (dw[i] - inner) / total;
        }
    }
    drow
}

/// Cross-entropy of `softmax(logits)` at `label`, natural log.
pub fn loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let value = lse - logits[label];
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(value.max(0.0))
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

fn softmax(z: &DVector<f64>) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite router logits".into()));
    }
    Ok(softmax_vec(z.as_slice()))
}

pub(crate) fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub(crate) fn random_experts(
    rng: &mut impl Rng,
    config: RoutingConfig,
    shape: ModelShape,
    input_gain: f64,
    output_gains: &[f64],
) -> Vec<Vec<Expert>> {
    let (d, h) = (shape.d_model, shape.d_hidden);
    output_gains[..config.n_layers]
        .iter()
        .map(|&output_gain| {
            (0..config.n_experts)
                .map(|_| Expert {
                    w1: gaussian_matrix(rng, h, d, input_gain / (d as f64).sqrt()),
                    w2: gaussian_matrix(rng, d, h, output_gain / (h as f64).sqrt()),
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const MODEL_SCHEMA: &str = "moe-model/1";

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    #[serde(with = "hex64::vec")]
    data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        // Row-major on disk.
        let data = (0..m.nrows())
            .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)])
            .collect();
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixRecord {
    fn into_matrix(self) -> Result<DMatrix<f64>> {
        check_dim("matrix payload", self.rows * self.cols, self.data.len())?;
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct ExpertRecord {
    w1: MatrixRecord,
    w2: MatrixRecord,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema: String,
    config: RoutingConfig,
    shape: ModelShape,
    routers: Vec<MatrixRecord>,
    experts: Vec<Vec<ExpertRecord>>,
    readout: MatrixRecord,
}

impl MoeModel {
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            schema: MODEL_SCHEMA.into(),
            config: self.config,
            shape: self.shape,
            routers: self.routers.iter().map(MatrixRecord::from).collect(),
            experts: self
                .experts
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|x| ExpertRecord {
                            w1: (&x.w1).into(),
                            w2: (&x.w2).into(),
                        })
                        .collect()
                })
                .collect(),
            readout: (&self.readout).into(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.schema != MODEL_SCHEMA {
            return Err(Error::Schema(format!(
                "expected model schema {MODEL_SCHEMA}, found {}",
                file.schema
            )));
        }
        let model = Self {
            config: file.config,
            shape: file.shape,
            routers: file
                .routers
                .into_iter()
                .map(MatrixRecord::into_matrix)
                .collect::<Result<_>>()?,
            experts: file
                .experts
                .into_iter()
                .map(|layer| {
                    layer
                        .into_iter()
                        .map(|x| {
                            Ok(Expert {
                                w1: x.w1.into_matrix()?,
                                w2: x.w2.into_matrix()?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?,
            readout: file.readout.into_matrix()?,
        };
        model.validate().map_err(|e| Error::Schema(e.to_string()))?;
        Ok(model)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
