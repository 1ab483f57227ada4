use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{Example, IGNORE_INDEX, PAD};
use crate::autograd::dense::{
    argmax, decay_gate, decay_gate_grad, linear, linear_backward, normalize_rows, normalize_rows_backward, sigmoid,
    softmax_cross_entropy, GatedMlp, MlpCache, MlpGrads,
};
use crate::autograd::{backward_sequential, record_tape, DecayGrad};
use crate::chunkwise::chunkwise_run;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::recurrence::{
    run_sequential_from, Decay, DecayKind, PrecondKind, RecurrenceConfig, SequenceBatch, StateMatrix, Variant,
};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PDCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub variant: Variant,
    pub precond: PrecondKind,
    pub x: f64,
    pub lambda: f64,
    pub normalize_qk: bool,
}

impl ModelConfig {
    /// `d_model = 64`, hidden width 128, the variant's default
    /// preconditioner, `x = 1.5`, unit-norm queries and keys.
    pub fn new(vocab_size: usize, variant: Variant) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            d_hidden: 128,
            variant,
            precond: variant.default_precond(),
            x: 1.5,
            lambda: 1e-4,
            normalize_qk: true,
        }
    }

    pub fn with_x(mut self, x: f64) -> Self {
        self.x = x;
        self
    }

    pub fn with_precond(mut self, precond: PrecondKind) -> Self {
        self.precond = precond;
        self
    }

    pub fn recurrence(&self) -> RecurrenceConfig {
        RecurrenceConfig::for_variant(self.variant, self.d_model, self.d_model)
            .with_precond(self.precond)
            .with_x(self.x)
            .with_lambda(self.lambda)
            .with_normalized_qk(self.normalize_qk)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_model == 0 || self.d_hidden == 0 {
            return Err(Error::InvalidConfig("vocab_size, d_model and d_hidden must be positive".into()));
        }
        if self.precond == PrecondKind::Exact {
            return Err(Error::Unsupported("training with the exact preconditioner".into()));
        }
        self.recurrence().validate()
    }

    fn decay_width(&self) -> usize {
        match self.variant.decay() {
            DecayKind::None => 0,
            DecayKind::Scalar => 1,
            DecayKind::Diagonal => self.d_model,
        }
    }

    fn has_diag_precond(&self) -> bool {
        matches!(self.precond, PrecondKind::DiagRaw | PrecondKind::DiagStable)
    }
}

/// One sequence-mixing layer. Gate projections produce pre-activations:
/// `beta = sigmoid(z)`, `alpha = exp(-softplus(z))`, and the same maps for
/// the preconditioner gates.
#[derive(Clone, Debug, PartialEq)]
pub struct MixParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub w_beta: Matrix,
    pub b_beta: Matrix,
    pub w_alpha: Matrix,
    pub b_alpha: Matrix,
    pub w_beta_p: Matrix,
    pub b_beta_p: Matrix,
    pub w_alpha_p: Matrix,
    pub b_alpha_p: Matrix,
    pub mu_raw: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl MlpParams {
    fn as_mlp(&self) -> GatedMlp<'_> {
        GatedMlp {
            w_gate: &self.w_gate,
            w_up: &self.w_up,
            w_down: &self.w_down,
        }
    }
}

/// All trainable tensors. Two mixing and two MLP blocks, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub embed: Matrix,
    pub mix: Vec<MixParams>,
    pub mlp: Vec<MlpParams>,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

pub const NUM_BLOCKS: usize = 2;

impl Params {
    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, m) in self.mix.iter().enumerate() {
            for (name, t) in [
                ("wq", &m.wq),
                ("wk", &m.wk),
                ("wv", &m.wv),
                ("w_beta", &m.w_beta),
                ("b_beta", &m.b_beta),
                ("w_alpha", &m.w_alpha),
                ("b_alpha", &m.b_alpha),
                ("w_beta_p", &m.w_beta_p),
                ("b_beta_p", &m.b_beta_p),
                ("w_alpha_p", &m.w_alpha_p),
                ("b_alpha_p", &m.b_alpha_p),
                ("mu_raw", &m.mu_raw),
            ] {
                out.push((format!("mix{l}.{name}"), t));
            }
            let p = &self.mlp[l];
            for (name, t) in [("w_gate", &p.w_gate), ("w_up", &p.w_up), ("w_down", &p.w_down)] {
                out.push((format!("mlp{l}.{name}"), t));
            }
        }
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    /// Same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed];
        for (m, p) in self.mix.iter_mut().zip(self.mlp.iter_mut()) {
            out.extend([
                &mut m.wq,
                &mut m.wk,
                &mut m.wv,
                &mut m.w_beta,
                &mut m.b_beta,
                &mut m.w_alpha,
                &mut m.b_alpha,
                &mut m.w_beta_p,
                &mut m.b_beta_p,
                &mut m.w_alpha_p,
                &mut m.b_alpha_p,
                &mut m.mu_raw,
            ]);
            out.extend([&mut p.w_gate, &mut p.w_up, &mut p.w_down]);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.scale(0.0));
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(crate::error::mismatch("flat parameter vector", self.num_params(), flat.len()));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(alpha, b.1);
        }
    }
}

/// Whether a named tensor is excluded from weight decay.
pub fn is_no_decay(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    leaf.starts_with("b_") || leaf == "mu_raw"
}

/// How the mixing layers evaluate their recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixPath {
    Sequential,
    Chunkwise(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyModel {
    pub config: ModelConfig,
    pub params: Params,
    pub seed: u64,
}

/// Loss and accuracy counts of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl BatchStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

struct MixCache {
    x: Matrix,
    q: Matrix,
    q_norms: Vec<f64>,
    k: Matrix,
    k_norms: Vec<f64>,
    beta: Vec<f64>,
    z_alpha: Matrix,
    beta_p: Vec<f64>,
    z_alpha_p: Vec<f64>,
    /// Tapes are re-recorded one sequence at a time during the backward
    /// pass; holding every state of the batch at once is slower than
    /// replaying the forward.
    seqs: Vec<SequenceBatch>,
}

struct MlpBlockCache {
    x: Matrix,
    inner: MlpCache,
}

/// Rows of the stacked batch: example `b`, position `t` sits at row `b * len + t`.
struct Layout {
    batch: usize,
    len: usize,
    tokens: Vec<u32>,
    /// `(row, label)` for every supervised position.
    targets: Vec<(usize, usize)>,
}

impl Layout {
    fn new(examples: &[&Example], vocab: usize) -> Result<Self> {
        let len = examples.iter().map(|e| e.effective_len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(examples.len() * len);
        let mut targets = Vec::new();
        for (b, ex) in examples.iter().enumerate() {
            for t in 0..len {
                let tok = ex.tokens.get(t).copied().unwrap_or(PAD);
                if tok as usize >= vocab {
                    return Err(Error::InvalidInput(format!("token {tok} outside vocabulary {vocab}")));
                }
                tokens.push(tok);
                let label = ex.labels.get(t).copied().unwrap_or(IGNORE_INDEX);
                if label != IGNORE_INDEX {
                    if label < 0 || label as usize >= vocab {
                        return Err(Error::InvalidInput(format!("label {label} outside vocabulary {vocab}")));
                    }
                    targets.push((b * len + t, label as usize));
                }
            }
        }
        Ok(Self {
            batch: examples.len(),
            len,
            tokens,
            targets,
        })
    }
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn filled(rows: usize, cols: usize, value: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| value)
}

fn column(values: Vec<f64>) -> Matrix {
    let n = values.len();
    Matrix::from_vec(n, 1, values).expect("column shape")
}

impl TinyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, h) = (config.vocab_size, config.d_model, config.d_hidden);
        let na = config.decay_width();
        let np = usize::from(config.has_diag_precond());
        let s = 1.0 / (d as f64).sqrt();
        let embed = normal(&mut rng, v, d, 1.0);
        let mut mix = Vec::new();
        let mut mlp = Vec::new();
        for _ in 0..NUM_BLOCKS {
            mix.push(MixParams {
                wq: normal(&mut rng, d, d, s),
                wk: normal(&mut rng, d, d, s),
                wv: normal(&mut rng, d, d, s),
                w_beta: normal(&mut rng, 1, d, s),
                b_beta: filled(1, 1, 0.0),
                w_alpha: normal(&mut rng, na, d, s),
                b_alpha: filled(1, na, -3.0),
                w_beta_p: normal(&mut rng, np, d, s),
                b_beta_p: filled(1, np, 0.0),
                w_alpha_p: normal(&mut rng, np, d, s),
                b_alpha_p: filled(1, np, -3.0),
                mu_raw: filled(1, np, 0.0),
            });
            mlp.push(MlpParams {
                w_gate: normal(&mut rng, h, d, s),
                w_up: normal(&mut rng, h, d, s),
                w_down: normal(&mut rng, d, h, 1.0 / (h as f64).sqrt()),
            });
        }
        let params = Params {
            embed,
            mix,
            mlp,
            w_out: normal(&mut rng, v, d, s),
            b_out: filled(1, v, 0.0),
        };
        Ok(Self { config, params, seed })
    }

    fn embed(&self, layout: &Layout) -> Matrix {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(layout.tokens.len(), d);
        for (i, &tok) in layout.tokens.iter().enumerate() {
            x.row_mut(i).copy_from_slice(self.params.embed.row(tok as usize));
        }
        x
    }

    fn mix_forward(&self, p: &MixParams, x: &Matrix, layout: &Layout, path: MixPath, record: bool) -> Result<(Matrix, Option<MixCache>)> {
        let cfg = self.config.recurrence();
        let (n, d, len) = (x.rows(), self.config.d_model, layout.len);
        let (mut q, mut k) = (linear(x, &p.wq, None), linear(x, &p.wk, None));
        let (mut q_norms, mut k_norms) = (Vec::new(), Vec::new());
        if self.config.normalize_qk {
            (q, q_norms) = normalize_rows(&q);
            (k, k_norms) = normalize_rows(&k);
        }
        let v = linear(x, &p.wv, None);
        let beta: Vec<f64> = linear(x, &p.w_beta, Some(p.b_beta.data())).data().iter().map(|&z| sigmoid(z)).collect();
        let z_alpha = linear(x, &p.w_alpha, Some(p.b_alpha.data()));
        let diag_p = self.config.has_diag_precond();
        let (beta_p, z_alpha_p) = if diag_p {
            let bp = linear(x, &p.w_beta_p, Some(p.b_beta_p.data())).data().iter().map(|&z| sigmoid(z)).collect();
            (bp, linear(x, &p.w_alpha_p, Some(p.b_alpha_p.data())).into_data())
        } else {
            (vec![1.0; n], vec![])
        };
        let mu_raw = p.mu_raw.data().first().copied().unwrap_or(0.0);

        let seqs: Vec<SequenceBatch> = (0..layout.batch)
            .map(|b| {
                let (lo, hi) = (b * len, (b + 1) * len);
                let mut seq = SequenceBatch::new(q.slice_rows(lo, hi), k.slice_rows(lo, hi), v.slice_rows(lo, hi));
                seq.beta = beta[lo..hi].to_vec();
                seq.alpha = match self.config.variant.decay() {
                    DecayKind::None => Decay::None,
                    DecayKind::Scalar => Decay::Scalar(z_alpha.data()[lo..hi].iter().map(|&z| decay_gate(z)).collect()),
                    DecayKind::Diagonal => Decay::Diagonal(z_alpha.slice_rows(lo, hi).map(decay_gate)),
                };
                if diag_p {
                    seq.beta_p = beta_p[lo..hi].to_vec();
                    seq.alpha_p = z_alpha_p[lo..hi].iter().map(|&z| decay_gate(z)).collect();
                    seq.mu_raw = mu_raw;
                }
                seq
            })
            .collect();

        let s0 = StateMatrix::zeros(d, d);
        let outs = seqs
            .par_iter()
            .map(|seq| match path {
                MixPath::Sequential => run_sequential_from(&cfg, seq, &s0).map(|r| r.outputs),
                MixPath::Chunkwise(c) => chunkwise_run(&cfg, seq, c, &s0).map(|r| r.outputs),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Matrix::zeros(n, d);
        for (b, o) in outs.iter().enumerate() {
            out.set_rows(b * len, o);
        }
        let cache = record.then(|| MixCache {
            x: x.clone(),
            q,
            q_norms,
            k,
            k_norms,
            beta,
            z_alpha,
            beta_p,
            z_alpha_p,
            seqs,
        });
        Ok((out, cache))
    }

    fn mix_backward(&self, p: &MixParams, cache: &MixCache, d_out: &Matrix, g: &mut MixParams, len: usize) -> Result<Matrix> {
        let cfg = self.config.recurrence();
        let (n, d) = (d_out.rows(), self.config.d_model);
        let s0 = StateMatrix::zeros(d, d);
        let bundles = cache
            .seqs
            .par_iter()
            .enumerate()
            .map(|(b, seq)| {
                let tape = record_tape(&cfg, seq, &s0)?;
                backward_sequential(&cfg, seq, &tape, &d_out.slice_rows(b * len, (b + 1) * len))
            })
            .collect::<Result<Vec<_>>>()?;

        let na = g.w_alpha.rows();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut dz_beta = vec![0.0; n];
        let mut dz_alpha = Matrix::zeros(n, na);
        let mut dz_beta_p = vec![0.0; n];
        let mut dz_alpha_p = vec![0.0; n];
        let mut dmu = 0.0;
        for (b, gb) in bundles.iter().enumerate() {
            let lo = b * len;
            dq.set_rows(lo, &gb.dq);
            dk.set_rows(lo, &gb.dk);
            dv.set_rows(lo, &gb.dv);
            for t in 0..len {
                let i = lo + t;
                let beta = cache.beta[i];
                dz_beta[i] = gb.dbeta[t] * beta * (1.0 - beta);
                match &gb.dalpha {
                    DecayGrad::None => {}
                    DecayGrad::Scalar(ga) => dz_alpha[(i, 0)] = ga[t] * decay_gate_grad(cache.z_alpha[(i, 0)]),
                    DecayGrad::Diagonal(ga) => {
                        for j in 0..na {
                            dz_alpha[(i, j)] = ga[(t, j)] * decay_gate_grad(cache.z_alpha[(i, j)]);
                        }
                    }
                }
                if !cache.z_alpha_p.is_empty() {
                    let bp = cache.beta_p[i];
                    dz_beta_p[i] = gb.dbeta_p[t] * bp * (1.0 - bp);
                    dz_alpha_p[i] = gb.dalpha_p[t] * decay_gate_grad(cache.z_alpha_p[i]);
                }
            }
            dmu += gb.dmu_raw;
        }
        if self.config.normalize_qk {
            dq = normalize_rows_backward(&cache.q, &cache.q_norms, &dq);
            dk = normalize_rows_backward(&cache.k, &cache.k_norms, &dk);
        }
        let x = &cache.x;
        let mut dx = linear_backward(x, &p.wq, &dq, &mut g.wq, None);
        dx.add_assign(&linear_backward(x, &p.wk, &dk, &mut g.wk, None));
        dx.add_assign(&linear_backward(x, &p.wv, &dv, &mut g.wv, None));
        dx.add_assign(&linear_backward(x, &p.w_beta, &column(dz_beta), &mut g.w_beta, Some(g.b_beta.data_mut())));
        if na > 0 {
            dx.add_assign(&linear_backward(x, &p.w_alpha, &dz_alpha, &mut g.w_alpha, Some(g.b_alpha.data_mut())));
        }
        if !cache.z_alpha_p.is_empty() {
            dx.add_assign(&linear_backward(x, &p.w_beta_p, &column(dz_beta_p), &mut g.w_beta_p, Some(g.b_beta_p.data_mut())));
            dx.add_assign(&linear_backward(x, &p.w_alpha_p, &column(dz_alpha_p), &mut g.w_alpha_p, Some(g.b_alpha_p.data_mut())));
            g.mu_raw.data_mut()[0] += dmu;
        }
        Ok(dx)
    }

    fn readout(&self, h: &Matrix, layout: &Layout) -> (Matrix, Matrix) {
        let d = self.config.d_model;
        let mut sel = Matrix::zeros(layout.targets.len(), d);
        for (j, (row, _)) in layout.targets.iter().enumerate() {
            sel.row_mut(j).copy_from_slice(h.row(*row));
        }
        let logits = linear(&sel, &self.params.w_out, Some(self.params.b_out.data()));
        (sel, logits)
    }

    fn score(logits: &Matrix, layout: &Layout) -> (BatchStats, Matrix) {
        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        let mut stats = BatchStats {
            total: layout.targets.len(),
            ..Default::default()
        };
        for (j, (_, label)) in layout.targets.iter().enumerate() {
            stats.loss += softmax_cross_entropy(logits.row(j), *label, dlogits.row_mut(j));
            stats.correct += usize::from(argmax(logits.row(j)) == *label);
        }
        if stats.total > 0 {
            stats.loss /= stats.total as f64;
            dlogits.scale(1.0 / stats.total as f64);
        }
        (stats, dlogits)
    }

    /// Mean cross-entropy and accuracy at the labeled positions.
    pub fn forward(&self, examples: &[&Example], path: MixPath) -> Result<BatchStats> {
        let layout = Layout::new(examples, self.config.vocab_size)?;
        let mut h = self.embed(&layout);
        for l in 0..NUM_BLOCKS {
            let (o, _) = self.mix_forward(&self.params.mix[l], &h, &layout, path, false)?;
            h.add_assign(&o);
            let (y, _) = self.params.mlp[l].as_mlp().forward(&h);
            h.add_assign(&y);
        }
        let (_, logits) = self.readout(&h, &layout);
        Ok(Self::score(&logits, &layout).0)
    }

    /// Batch statistics and the gradient of the mean loss.
    pub fn loss_and_grad(&self, examples: &[&Example]) -> Result<(BatchStats, Params)> {
        let layout = Layout::new(examples, self.config.vocab_size)?;
        let mut h = self.embed(&layout);
        let mut mix_caches = Vec::new();
        let mut mlp_caches = Vec::new();
        for l in 0..NUM_BLOCKS {
            let (o, cache) = self.mix_forward(&self.params.mix[l], &h, &layout, MixPath::Sequential, true)?;
            mix_caches.push(cache.expect("recorded"));
            h.add_assign(&o);
            let (y, inner) = self.params.mlp[l].as_mlp().forward(&h);
            mlp_caches.push(MlpBlockCache { x: h.clone(), inner });
            h.add_assign(&y);
        }
        let (sel, logits) = self.readout(&h, &layout);
        let (stats, dlogits) = Self::score(&logits, &layout);

        let mut grads = self.params.zeros_like();
        let d_sel = linear_backward(&sel, &self.params.w_out, &dlogits, &mut grads.w_out, Some(grads.b_out.data_mut()));
        let mut dh = Matrix::zeros(h.rows(), h.cols());
        for (j, (row, _)) in layout.targets.iter().enumerate() {
            dh.row_mut(*row).copy_from_slice(d_sel.row(j));
        }
        for l in (0..NUM_BLOCKS).rev() {
            let mlp = self.params.mlp[l].as_mlp();
            let mut mg = MlpGrads::zeros_like(&mlp);
            let dx = mlp.backward(&mlp_caches[l].x, &mlp_caches[l].inner, &dh, &mut mg);
            dh.add_assign(&dx);
            grads.mlp[l] = MlpParams {
                w_gate: mg.w_gate,
                w_up: mg.w_up,
                w_down: mg.w_down,
            };
            let dx = self.mix_backward(&self.params.mix[l], &mix_caches[l], &dh, &mut grads.mix[l], layout.len)?;
            dh.add_assign(&dx);
        }
        for (i, &tok) in layout.tokens.iter().enumerate() {
            for (g, d) in grads.embed.row_mut(tok as usize).iter_mut().zip(dh.row(i)) {
                *g += d;
            }
        }
        Ok((stats, grads))
    }

    /// Exact-match accuracy over labeled positions, in batches of 256.
    pub fn evaluate(&self, examples: &[Example], path: MixPath) -> Result<BatchStats> {
        let mut total = BatchStats::default();
        let mut loss_sum = 0.0;
        for chunk in examples.chunks(256) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let s = self.forward(&refs, path)?;
            loss_sum += s.loss * s.total as f64;
            total.correct += s.correct;
            total.total += s.total;
        }
        if total.total > 0 {
            total.loss = loss_sum / total.total as f64;
        }
        Ok(total)
    }

    /// Flat little-endian f64 parameters behind a JSON header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            seed: self.seed,
            tensors: self
                .params
                .tensors()
                .iter()
                .map(|(name, t)| TensorShape {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
            num_params: self.params.num_params(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for x in self.params.flatten() {
            out.write_all(&x.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::InvalidInput(format!("{} is not a checkpoint", path.display())));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let mut model = TinyModel::new(header.config.clone(), header.seed)?;
        let shapes: Vec<(usize, usize)> = model.params.tensors().iter().map(|(_, t)| t.shape()).collect();
        let stored: Vec<(usize, usize)> = header.tensors.iter().map(|t| (t.rows, t.cols)).collect();
        if shapes != stored {
            return Err(Error::InvalidInput("checkpoint tensor shapes do not match its config".into()));
        }
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * header.num_params {
            return Err(crate::error::mismatch("checkpoint payload bytes", 8 * header.num_params, bytes.len()));
        }
        let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        model.params.load_flat(&flat)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    seed: u64,
    tensors: Vec<TensorShape>,
    num_params: usize,
}
