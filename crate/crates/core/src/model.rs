//! Encoder-decoder attention model for knowledge tracing.
//!
//! The encoder reads problem embeddings `p_π`, the decoder reads the shifted
//! interaction embeddings `k_j` (`j = π + r·N`), and every attention site is
//! causally masked so the prediction at position `i` depends only on
//! `π_1..π_i` and `r_1..r_{i−1}`. A separate projection head maps each
//! problem embedding into the Skill2Vec space for the projection loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tape::{causal_mask, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of problems; problems are identified with skills.
    pub n_problems: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub dropout: f64,
    pub skill_dim: usize,
    pub max_len: usize,
    pub feedforward_dim: usize,
    /// Hidden width of a two-layer projection head; `None` for a single
    /// affine map.
    pub projection_hidden: Option<usize>,
}

impl ModelConfig {
    /// Published architecture: one head, four encoder and four decoder
    /// layers, width 100, dropout 0.05, 25-dimensional skill space.
    pub fn new(n_problems: usize) -> Self {
        ModelConfig {
            n_problems,
            d_model: 100,
            n_heads: 1,
            n_encoder_layers: 4,
            n_decoder_layers: 4,
            dropout: 0.05,
            skill_dim: 25,
            max_len: 200,
            feedforward_dim: 400,
            projection_hidden: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_problems == 0 || self.d_model == 0 || self.skill_dim == 0 || self.max_len == 0 {
            return fail("n_problems, d_model, skill_dim and max_len must be positive".into());
        }
        if self.feedforward_dim == 0 || self.projection_hidden == Some(0) {
            return fail("hidden widths must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let (n, d, f, s, l) = (self.n_problems, self.d_model, self.feedforward_dim, self.skill_dim, self.max_len);
        let attention = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let encoder = 2 * 2 * d + attention + ffn;
        let decoder = 3 * 2 * d + 2 * attention + ffn;
        let projection = match self.projection_hidden {
            None => d * s + s,
            Some(h) => d * h + h + h * s + s,
        };
        n * d + (2 * n + 1) * d + l * d
            + self.n_encoder_layers * encoder
            + self.n_decoder_layers * decoder
            + 2 * 2 * d
            + d + 1
            + projection
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        self.tensors.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    problem: usize,
    interaction: usize,
    position: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    head: Linear,
    projection: Vec<Linear>,
}

struct Init<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> usize {
        let t = Tensor::randn(&[rows, dim], 1.0 / (dim as f64).sqrt(), &mut self.rng);
        self.params.push(name.to_string(), t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::uniform(&[fan_in, fan_out], bound, &mut self.rng);
        Linear {
            weight: self.params.push(format!("{name}.weight"), w),
            bias: self.params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.params.push(format!("{name}.gain"), Tensor::full(&[d], T::one())),
            bias: self.params.push(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            query: self.linear(&format!("{name}.query"), d, d),
            key: self.linear(&format!("{name}.key"), d, d),
            value: self.linear(&format!("{name}.value"), d, d),
            out: self.linear(&format!("{name}.out"), d, d),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            hidden: self.linear(&format!("{name}.hidden"), d, f),
            out: self.linear(&format!("{name}.out"), f, d),
        }
    }
}

/// All trainable state of the knowledge tracing model.
#[derive(Clone, Debug)]
pub struct KtModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Values produced by [`KtModel::predict`], flattened `batch × len`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput<T> {
    /// Predicted probability of a correct answer.
    pub probs: Vec<T>,
    /// Projected problem embeddings, `skill_dim` values per position.
    pub projected: Vec<T>,
    pub mask: Vec<bool>,
    pub labels: Vec<u8>,
}

/// A recorded forward pass, ready for loss construction and backward.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    /// Tape handle of every parameter, in [`ParamStore`] order.
    pub params: Vec<Var>,
    /// Gathered problem embeddings `[batch, len, d_model]`.
    pub problem_embeddings: Var,
    /// `r̂` as `[batch, len, 1]`.
    pub probs: Var,
}

struct Ctx<'a, T> {
    tape: &'a mut Tape<T>,
    vars: &'a [Var],
    mode: Mode,
    dropout: f64,
    seeds: ChaCha8Rng,
}

impl<T: Real> Ctx<'_, T> {
    fn linear(&mut self, x: Var, l: Linear) -> Result<Var> {
        let y = self.tape.matmul(x, self.vars[l.weight])?;
        self.tape.add(y, self.vars[l.bias])
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var> {
        let y = self.tape.layer_norm(x);
        let y = self.tape.mul(y, self.vars[n.gain])?;
        self.tape.add(y, self.vars[n.bias])
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        if self.mode == Mode::Eval || self.dropout == 0.0 {
            return Ok(x);
        }
        let seed = self.seeds.random();
        self.tape.dropout(x, self.dropout, seed)
    }

    fn attention(&mut self, query_in: Var, kv_in: Var, a: Attention, heads: usize, mask: &Tensor<T>) -> Result<Var> {
        let q = self.linear(query_in, a.query)?;
        let k = self.linear(kv_in, a.key)?;
        let v = self.linear(kv_in, a.value)?;
        let d = self.tape.value(q).last_dim();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.tape.slice_last(q, h * dh, dh)?,
                    self.tape.slice_last(k, h * dh, dh)?,
                    self.tape.slice_last(v, h * dh, dh)?,
                )
            };
            let scores = self.tape.batch_matmul(qh, kh, true)?;
            let scores = self.tape.scale(scores, scale);
            let weights = self.tape.softmax(scores, Some(mask))?;
            outs.push(self.tape.batch_matmul(weights, vh, false)?);
        }
        let joined = if heads == 1 { outs[0] } else { self.tape.concat(&outs)? };
        let out = self.linear(joined, a.out)?;
        self.dropout(out)
    }

    fn feed_forward(&mut self, x: Var, f: FeedForward) -> Result<Var> {
        let h = self.linear(x, f.hidden)?;
        let h = self.tape.relu(h);
        let h = self.dropout(h)?;
        let y = self.linear(h, f.out)?;
        self.dropout(y)
    }

    fn residual(&mut self, x: Var, update: Var) -> Result<Var> {
        self.tape.add(x, update)
    }
}

impl<T: Real> KtModel<T> {
    /// Seeded initialization: embeddings `N(0, 1/d_model)`, linear weights
    /// Glorot-uniform, biases zero, layer-norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (n, d) = (config.n_problems, config.d_model);
        let mut params = ParamStore::new();
        let mut init = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let problem = init.embedding("problem_embedding", n, d);
        let interaction = init.embedding("interaction_embedding", 2 * n + 1, d);
        let position = init.embedding("position_embedding", config.max_len, d);
        let encoder = (0..config.n_encoder_layers)
            .map(|i| EncoderLayer {
                norm_attn: init.norm(&format!("encoder.{i}.norm_attn"), d),
                attn: init.attention(&format!("encoder.{i}.attn"), d),
                norm_ff: init.norm(&format!("encoder.{i}.norm_ff"), d),
                ff: init.feed_forward(&format!("encoder.{i}.ff"), d, config.feedforward_dim),
            })
            .collect();
        let encoder_norm = init.norm("encoder.norm", d);
        let decoder = (0..config.n_decoder_layers)
            .map(|i| DecoderLayer {
                norm_self: init.norm(&format!("decoder.{i}.norm_self"), d),
                self_attn: init.attention(&format!("decoder.{i}.self_attn"), d),
                norm_cross: init.norm(&format!("decoder.{i}.norm_cross"), d),
                cross_attn: init.attention(&format!("decoder.{i}.cross_attn"), d),
                norm_ff: init.norm(&format!("decoder.{i}.norm_ff"), d),
                ff: init.feed_forward(&format!("decoder.{i}.ff"), d, config.feedforward_dim),
            })
            .collect();
        let decoder_norm = init.norm("decoder.norm", d);
        let head = init.linear("head", d, 1);
        let projection = match config.projection_hidden {
            None => vec![init.linear("projection", d, config.skill_dim)],
            Some(h) => vec![
                init.linear("projection.0", d, h),
                init.linear("projection.1", h, config.skill_dim),
            ],
        };
        let layout = Layout {
            problem,
            interaction,
            position,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            head,
            projection,
        };
        Ok(KtModel {
            config: config.clone(),
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored tensors, matched by name.
    pub fn from_named_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, tensor) in tensors {
            let idx = model
                .params
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            if model.params.tensors[idx].shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    model.params.tensors[idx].shape()
                )));
            }
            model.params.tensors[idx] = tensor.with_grad();
        }
        Ok(model)
    }
}

impl<T: Real> KtModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn check_batch(&self, batch: &Batch) -> Result<(Vec<usize>, Vec<usize>)> {
        let n = self.config.n_problems;
        if batch.len > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "batch length {} exceeds max_len {}",
                batch.len, self.config.max_len
            )));
        }
        if batch.size == 0 || batch.len == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if batch.n_problems != n {
            return Err(Error::Config(format!(
                "batch built for {} problems, model has {n}",
                batch.n_problems
            )));
        }
        let mut enc = batch.encoder_ids.clone();
        let mut dec = batch.decoder_ids.clone();
        for (i, &valid) in batch.mask.iter().enumerate() {
            if !valid {
                // Padding only trails real positions, which never attend to it.
                enc[i] = 0;
                dec[i] = 0;
                continue;
            }
            if enc[i] >= n {
                return Err(Error::Range { id: enc[i], limit: n, context: "problem id in batch".into() });
            }
            if dec[i] > 2 * n {
                return Err(Error::Range { id: dec[i], limit: 2 * n + 1, context: "interaction id in batch".into() });
            }
        }
        Ok((enc, dec))
    }

    /// Runs the model on `batch`. Parameters are trainable leaves in
    /// [`Mode::Train`] and constants in [`Mode::Eval`]; dropout is active
    /// only in training and its masks derive from `dropout_seed`.
    pub fn forward(&self, batch: &Batch, mode: Mode, dropout_seed: u64) -> Result<ForwardPass<T>> {
        let (enc_ids, dec_ids) = self.check_batch(batch)?;
        let (b, len) = (batch.size, batch.len);
        let heads = self.config.n_heads;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| match mode {
                Mode::Train => tape.leaf(t.clone()),
                Mode::Eval => tape.constant(t.clone()),
            })
            .collect();
        let mask = causal_mask::<T>(len);
        let lay = &self.layout;
        let mut cx = Ctx {
            tape: &mut tape,
            vars: &vars,
            mode,
            dropout: self.config.dropout,
            seeds: ChaCha8Rng::seed_from_u64(dropout_seed),
        };

        let positions: Vec<usize> = (0..len).collect();
        let pos = cx.tape.gather(vars[lay.position], &positions, &[len])?;
        let problem_embeddings = cx.tape.gather(vars[lay.problem], &enc_ids, &[b, len])?;
        let mut x = cx.tape.add(problem_embeddings, pos)?;
        for layer in &lay.encoder {
            let h = cx.norm(x, layer.norm_attn)?;
            let a = cx.attention(h, h, layer.attn, heads, &mask)?;
            x = cx.residual(x, a)?;
            let h = cx.norm(x, layer.norm_ff)?;
            let f = cx.feed_forward(h, layer.ff)?;
            x = cx.residual(x, f)?;
        }
        let memory = cx.norm(x, lay.encoder_norm)?;

        let k = cx.tape.gather(vars[lay.interaction], &dec_ids, &[b, len])?;
        let mut y = cx.tape.add(k, pos)?;
        for layer in &lay.decoder {
            let h = cx.norm(y, layer.norm_self)?;
            let a = cx.attention(h, h, layer.self_attn, heads, &mask)?;
            y = cx.residual(y, a)?;
            let h = cx.norm(y, layer.norm_cross)?;
            let a = cx.attention(h, memory, layer.cross_attn, heads, &mask)?;
            y = cx.residual(y, a)?;
            let h = cx.norm(y, layer.norm_ff)?;
            let f = cx.feed_forward(h, layer.ff)?;
            y = cx.residual(y, f)?;
        }
        let y = cx.norm(y, lay.decoder_norm)?;
        let logits = cx.linear(y, lay.head)?;
        let probs = cx.tape.sigmoid(logits);

        Ok(ForwardPass {
            tape,
            params: vars,
            problem_embeddings,
            probs,
        })
    }

    /// Projection head applied to the gathered problem embeddings.
    pub fn project(&self, pass: &mut ForwardPass<T>) -> Result<Var> {
        let mut h = pass.problem_embeddings;
        let last = self.layout.projection.len() - 1;
        for (i, l) in self.layout.projection.iter().enumerate() {
            let y = pass.tape.matmul(h, pass.params[l.weight])?;
            h = pass.tape.add(y, pass.params[l.bias])?;
            if i < last {
                h = pass.tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Eval-mode predictions with projected embeddings.
    pub fn predict(&self, batch: &Batch) -> Result<PredictionOutput<T>> {
        let mut pass = self.forward(batch, Mode::Eval, 0)?;
        let projected = self.project(&mut pass)?;
        let probs = pass.tape.value(pass.probs).data().to_vec();
        if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("prediction at flat position {i}")));
        }
        Ok(PredictionOutput {
            probs,
            projected: pass.tape.value(projected).data().to_vec(),
            mask: batch.mask.clone(),
            labels: batch.labels.clone(),
        })
    }
}

/// Knowledge tracing loss: mean binary cross-entropy of `r̂` over the valid
/// positions of `batch`.
pub fn kt_loss<T: Real>(tape: &mut Tape<T>, probs: Var, batch: &Batch) -> Result<Var> {
    let labels: Vec<T> = batch.labels.iter().map(|&r| T::from_u8(r).unwrap()).collect();
    tape.bce(probs, &labels, &batch.mask)
}

/// Skill projection loss: mean over valid positions of
/// `‖W_proj(p_π) − s_π‖² / skill_dim`, with the Skill2Vec vectors `s` held
/// constant. Zero when no position is valid.
pub fn projection_loss<T: Real>(
    tape: &mut Tape<T>,
    projected: Var,
    skill_table: &EmbeddingTable,
    batch: &Batch,
) -> Result<Var> {
    let shape = tape.shape(projected).to_vec();
    let skill_dim = shape[shape.len() - 1];
    if skill_table.dim() != skill_dim {
        return Err(Error::shape("projection_loss", &shape, &[skill_table.count(), skill_table.dim()]));
    }
    if skill_table.count() < batch.n_problems {
        return Err(Error::Config(format!(
            "skill table has {} rows for {} problems",
            skill_table.count(),
            batch.n_problems
        )));
    }
    let mut target = Vec::with_capacity(batch.encoder_ids.len() * skill_dim);
    for (&id, &valid) in batch.encoder_ids.iter().zip(&batch.mask) {
        if valid {
            target.extend(skill_table.row(id).iter().map(|&v| T::from_f32(v).unwrap()));
        } else {
            target.extend(std::iter::repeat_n(T::zero(), skill_dim));
        }
    }
    let target = Tensor::new(&shape, target)?;
    tape.masked_mse(projected, &target, &batch.mask)
}

/// `L = L_k + λ·L_p`. With `λ = 0` or no projection term the knowledge
/// tracing loss is returned unchanged.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, kt: Var, projection: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    match projection {
        Some(lp) if lambda != 0.0 => {
            let weighted = tape.scale(lp, T::from_f64_lossy(lambda));
            tape.add(kt, weighted)
        }
        _ => Ok(kt),
    }
}

/// Loss handles for one training step.
pub struct StepLosses {
    pub kt: Var,
    pub projection: Option<Var>,
    pub total: Var,
}

impl<T: Real> KtModel<T> {
    /// Forward pass plus the full objective. The projection term is only
    /// built when `lambda > 0` and a skill table is given.
    pub fn loss(
        &self,
        batch: &Batch,
        skill_table: Option<&EmbeddingTable>,
        lambda: f64,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<(ForwardPass<T>, StepLosses)> {
        let mut pass = self.forward(batch, mode, dropout_seed)?;
        let kt = kt_loss(&mut pass.tape, pass.probs, batch)?;
        let projection = match skill_table {
            Some(table) if lambda > 0.0 => {
                let projected = self.project(&mut pass)?;
                Some(projection_loss(&mut pass.tape, projected, table, batch)?)
            }
            _ => None,
        };
        let total = total_loss(&mut pass.tape, kt, projection, lambda)?;
        Ok((pass, StepLosses { kt, projection, total }))
    }
}
