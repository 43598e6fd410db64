//! Decoder-only transformer over latent tokens: pre-LN causal attention
//! blocks, learned positional embeddings, and an output head restricted to
//! the 128 codeword tokens. Two named budgets: "nano" and "large".

use crate::adam::{scheduled_lr, AdamState};
use crate::artifact::{self, Checkpoint, TokenSeq, MAGIC_DOT};
use crate::dataset::IQFrame;
use crate::error::{CoreError, Result};
use crate::kernels as k;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokens::{class_token, TrainPair, VOCAB_SIZE};
use crate::vqvae::{self, Vqvae, CODEBOOK_SIZE, LATENT_LEN};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAX_SEQ: usize = 512;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DotConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub dropout: f32,
    /// target parameter count (non-positional); checked within ±10%
    pub budget: Option<usize>,
}

impl DotConfig {
    pub fn nano() -> Self {
        DotConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 128,
            vocab: VOCAB_SIZE,
            max_seq: MAX_SEQ,
            dropout: 0.0,
            budget: Some(36_200),
        }
    }

    pub fn large() -> Self {
        DotConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 96,
            d_ff: 384,
            vocab: VOCAB_SIZE,
            max_seq: MAX_SEQ,
            dropout: 0.0,
            budget: Some(443_000),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq < LATENT_LEN {
            return Err(CoreError::InvalidArgument(format!(
                "max_seq {} < {LATENT_LEN}",
                self.max_seq
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::InvalidArgument(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

struct DotLayer {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub struct Dot {
    pub config: DotConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<DotLayer>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub struct DotVars {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    lnf_g: Var,
    lnf_b: Var,
    head_w: Var,
    head_b: Var,
}

fn init_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(&[rows, cols], rng::normal_vec(r, rows * cols, 0.02))
        .unwrap()
        .param()
}

impl Dot {
    pub fn new(config: DotConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(rng::derive_seed(seed, &[0xd07]));
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| DotLayer {
                ln1_g: Tensor::from_vec(&[d], vec![1.0; d]).unwrap().param(),
                ln1_b: Tensor::zeros(&[d]).param(),
                wq: init_mat(&mut r, d, d),
                bq: Tensor::zeros(&[d]).param(),
                wk: init_mat(&mut r, d, d),
                bk: Tensor::zeros(&[d]).param(),
                wv: init_mat(&mut r, d, d),
                bv: Tensor::zeros(&[d]).param(),
                wo: init_mat(&mut r, d, d),
                bo: Tensor::zeros(&[d]).param(),
                ln2_g: Tensor::from_vec(&[d], vec![1.0; d]).unwrap().param(),
                ln2_b: Tensor::zeros(&[d]).param(),
                w1: init_mat(&mut r, d, config.d_ff),
                b1: Tensor::zeros(&[config.d_ff]).param(),
                w2: init_mat(&mut r, config.d_ff, d),
                b2: Tensor::zeros(&[d]).param(),
            })
            .collect();
        let model = Dot {
            tok_emb: init_mat(&mut r, config.vocab, d),
            pos_emb: init_mat(&mut r, config.max_seq, d),
            layers,
            lnf_g: Tensor::from_vec(&[d], vec![1.0; d]).unwrap().param(),
            lnf_b: Tensor::zeros(&[d]).param(),
            head_w: init_mat(&mut r, d, CODEBOOK_SIZE),
            head_b: Tensor::zeros(&[CODEBOOK_SIZE]).param(),
            config,
        };
        model.check_budget()?;
        Ok(model)
    }

    /// Parameter count excluding the positional table (the conventional
    /// budget figure for GPT-style models).
    pub fn param_count(&self) -> usize {
        let total: usize = self.params().iter().map(|p| p.numel()).sum();
        total - self.pos_emb.numel()
    }

    fn check_budget(&self) -> Result<()> {
        if let Some(budget) = self.config.budget {
            let n = self.param_count() as f64;
            let b = budget as f64;
            if (n - b).abs() > 0.10 * b {
                return Err(CoreError::InvalidArgument(format!(
                    "parameter count {n} outside ±10% of budget {budget}"
                )));
            }
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for i in 0..self.layers.len() {
            for f in [
                "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g",
                "ln2_b", "w1", "b1", "w2", "b2",
            ] {
                names.push(format!("l{i}.{f}"));
            }
        }
        names.extend(["lnf_g", "lnf_b", "head_w", "head_b"].map(String::from));
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            p.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        p.extend([&self.lnf_g, &self.lnf_b, &self.head_w, &self.head_b]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            p.extend([
                &mut l.ln1_g, &mut l.ln1_b, &mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk,
                &mut l.wv, &mut l.bv, &mut l.wo, &mut l.bo, &mut l.ln2_g, &mut l.ln2_b,
                &mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2,
            ]);
        }
        p.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head_w, &mut self.head_b]);
        p
    }

    pub fn insert_params(&self, tape: &mut Tape) -> DotVars {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_g: tape.leaf(l.ln1_g.clone()),
                ln1_b: tape.leaf(l.ln1_b.clone()),
                wq: tape.leaf(l.wq.clone()),
                bq: tape.leaf(l.bq.clone()),
                wk: tape.leaf(l.wk.clone()),
                bk: tape.leaf(l.bk.clone()),
                wv: tape.leaf(l.wv.clone()),
                bv: tape.leaf(l.bv.clone()),
                wo: tape.leaf(l.wo.clone()),
                bo: tape.leaf(l.bo.clone()),
                ln2_g: tape.leaf(l.ln2_g.clone()),
                ln2_b: tape.leaf(l.ln2_b.clone()),
                w1: tape.leaf(l.w1.clone()),
                b1: tape.leaf(l.b1.clone()),
                w2: tape.leaf(l.w2.clone()),
                b2: tape.leaf(l.b2.clone()),
            })
            .collect();
        DotVars {
            tok_emb: tape.leaf(self.tok_emb.clone()),
            pos_emb: tape.leaf(self.pos_emb.clone()),
            layers,
            lnf_g: tape.leaf(self.lnf_g.clone()),
            lnf_b: tape.leaf(self.lnf_b.clone()),
            head_w: tape.leaf(self.head_w.clone()),
            head_b: tape.leaf(self.head_b.clone()),
        }
    }

    fn var_order(vars: &DotVars) -> Vec<Var> {
        let mut v = vec![vars.tok_emb, vars.pos_emb];
        for l in &vars.layers {
            v.extend([
                l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_g,
                l.ln2_b, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        v.extend([vars.lnf_g, vars.lnf_b, vars.head_w, vars.head_b]);
        v
    }

    /// Causal forward: logits[T×128]. `drop_seed` enables dropout masks for
    /// training; `None` runs deterministic inference.
    pub fn forward_t(
        &self,
        tape: &mut Tape,
        vars: &DotVars,
        x_seq: &[u16],
        drop_seed: Option<u64>,
    ) -> Result<Var> {
        let t = x_seq.len();
        if t == 0 || t > self.config.max_seq {
            return Err(CoreError::InvalidArgument(format!("sequence length {t}")));
        }
        if let Some(bad) = x_seq.iter().find(|x| **x as usize >= self.config.vocab) {
            return Err(CoreError::InvalidArgument(format!("token {bad} out of vocab")));
        }
        let idx: Vec<usize> = x_seq.iter().map(|x| *x as usize).collect();
        let te = tape.embedding(vars.tok_emb, &idx)?;
        let pe_full = tape.slice_rows(vars.pos_emb, 0, t)?;
        let mut h = tape.add(te, pe_full)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        for (li, lv) in vars.layers.iter().enumerate() {
            let hn = tape.layernorm(h, lv.ln1_g, lv.ln1_b)?;
            let q0 = tape.matmul(hn, lv.wq)?;
            let q = tape.add_row(q0, lv.bq)?;
            let k0 = tape.matmul(hn, lv.wk)?;
            let kk = tape.add_row(k0, lv.bk)?;
            let v0 = tape.matmul(hn, lv.wv)?;
            let vv = tape.add_row(v0, lv.bv)?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for hd in 0..self.config.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(kk, hd * dh, dh)?;
                let vh = tape.slice_cols(vv, hd * dh, dh)?;
                let s0 = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s0, scale);
                let a = tape.causal_softmax(s)?;
                heads.push(tape.matmul(a, vh)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let o0 = tape.matmul(cat, lv.wo)?;
            let mut o = tape.add_row(o0, lv.bo)?;
            if let Some(ds) = drop_seed {
                o = self.dropout_t(tape, o, rng::derive_seed(ds, &[li as u64, 0]))?;
            }
            h = tape.add(h, o)?;
            let hn2 = tape.layernorm(h, lv.ln2_g, lv.ln2_b)?;
            let m0 = tape.matmul(hn2, lv.w1)?;
            let m1 = tape.add_row(m0, lv.b1)?;
            let mut m2 = tape.gelu(m1);
            if let Some(ds) = drop_seed {
                m2 = self.dropout_t(tape, m2, rng::derive_seed(ds, &[li as u64, 1]))?;
            }
            let m3 = tape.matmul(m2, lv.w2)?;
            let m4 = tape.add_row(m3, lv.b2)?;
            h = tape.add(h, m4)?;
        }
        let hf = tape.layernorm(h, vars.lnf_g, vars.lnf_b)?;
        let lg0 = tape.matmul(hf, vars.head_w)?;
        tape.add_row(lg0, vars.head_b)
    }

    fn dropout_t(&self, tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
        let p = self.config.dropout;
        if p == 0.0 {
            return Ok(x);
        }
        use rand::Rng;
        let n = tape.value(x).numel();
        let shape = tape.value(x).shape.clone();
        let mut r = rng::seeded(seed);
        let keep = 1.0 - p;
        let mask: Vec<f32> =
            (0..n).map(|_| if r.gen::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = tape.constant(Tensor::from_vec(&shape, mask)?);
        tape.mul(x, m)
    }

    /// CE of one shifted pair, averaged over the 511 scored positions.
    pub fn pair_loss_t(&self, tape: &mut Tape, vars: &DotVars, pair: &TrainPair, drop_seed: Option<u64>) -> Result<Var> {
        let logits = self.forward_t(tape, vars, &pair.x_seq, drop_seed)?;
        let t = pair.x_seq.len();
        let scored = tape.slice_rows(logits, 1, t - 1)?;
        let targets: Vec<usize> = pair.y_seq.iter().map(|y| *y as usize).collect();
        tape.cross_entropy(scored, &targets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "config": self.config });
        let names = self.param_names();
        let tensors: Vec<(String, &Tensor)> =
            names.into_iter().zip(self.params().into_iter()).collect();
        artifact::write_checkpoint(path, MAGIC_DOT, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck: Checkpoint = artifact::read_checkpoint(path, MAGIC_DOT)?;
        let config: DotConfig = serde_json::from_value(ck.header["config"].clone())?;
        let mut model = Dot::new(config, 0)?;
        let names = model.param_names();
        for (name, p) in names.iter().zip(model.params_mut().into_iter()) {
            let t = ck.take(name)?;
            if t.shape != p.shape {
                return Err(CoreError::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    t.shape, p.shape
                )));
            }
            p.data = t.data;
        }
        Ok(model)
    }
}

/// Incremental decoder with per-layer KV cache; forward values match the
/// tape forward to float tolerance.
pub struct Sampler<'a> {
    model: &'a Dot,
    kc: Vec<Vec<f32>>,
    vc: Vec<Vec<f32>>,
    pos: usize,
}

fn layernorm_vec(x: &[f32], g: &[f32], b: &[f32], out: &mut [f32]) {
    const EPS: f32 = 1e-5;
    let c = x.len();
    let mean = x.iter().sum::<f32>() / c as f32;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
    let inv = 1.0 / (var + EPS).sqrt();
    for j in 0..c {
        out[j] = g[j] * (x[j] - mean) * inv + b[j];
    }
}

fn affine(x: &[f32], w: &Tensor, b: &Tensor, out: &mut [f32]) {
    out.copy_from_slice(&b.data);
    for (i, xi) in x.iter().enumerate() {
        if *xi != 0.0 {
            k::axpy(*xi, &w.data[i * w.cols()..(i + 1) * w.cols()], out);
        }
    }
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a Dot) -> Self {
        let n = model.config.n_layers;
        Sampler { model, kc: vec![Vec::new(); n], vc: vec![Vec::new(); n], pos: 0 }
    }

    /// Feed one token; returns the 128 codeword logits at this position.
    pub fn step(&mut self, token: u16) -> Result<Vec<f32>> {
        let cfg = &self.model.config;
        if token as usize >= cfg.vocab {
            return Err(CoreError::InvalidArgument(format!("token {token} out of vocab")));
        }
        if self.pos >= cfg.max_seq {
            return Err(CoreError::InvalidArgument("sampler past max_seq".into()));
        }
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut x = vec![0.0f32; d];
        for j in 0..d {
            x[j] = self.model.tok_emb.data[token as usize * d + j]
                + self.model.pos_emb.data[self.pos * d + j];
        }
        let mut hn = vec![0.0f32; d];
        let (mut q, mut kv, mut vv) = (vec![0.0f32; d], vec![0.0f32; d], vec![0.0f32; d]);
        let mut ctx = vec![0.0f32; d];
        let mut o = vec![0.0f32; d];
        let mut m = vec![0.0f32; cfg.d_ff];
        let t1 = self.pos + 1;
        for (li, l) in self.model.layers.iter().enumerate() {
            layernorm_vec(&x, &l.ln1_g.data, &l.ln1_b.data, &mut hn);
            affine(&hn, &l.wq, &l.bq, &mut q);
            affine(&hn, &l.wk, &l.bk, &mut kv);
            affine(&hn, &l.wv, &l.bv, &mut vv);
            self.kc[li].extend_from_slice(&kv);
            self.vc[li].extend_from_slice(&vv);
            for hd in 0..cfg.n_heads {
                let qh = &q[hd * dh..(hd + 1) * dh];
                let mut scores = vec![0.0f32; t1];
                for t in 0..t1 {
                    scores[t] = scale * k::dot(qh, &self.kc[li][t * d + hd * dh..t * d + (hd + 1) * dh]);
                }
                k::softmax_inplace(&mut scores);
                let ch = &mut ctx[hd * dh..(hd + 1) * dh];
                ch.fill(0.0);
                for t in 0..t1 {
                    k::axpy(scores[t], &self.vc[li][t * d + hd * dh..t * d + (hd + 1) * dh], ch);
                }
            }
            affine(&ctx, &l.wo, &l.bo, &mut o);
            for j in 0..d {
                x[j] += o[j];
            }
            layernorm_vec(&x, &l.ln2_g.data, &l.ln2_b.data, &mut hn);
            affine(&hn, &l.w1, &l.b1, &mut m);
            for v in m.iter_mut() {
                *v = k::gelu(*v);
            }
            affine(&m, &l.w2, &l.b2, &mut o);
            for j in 0..d {
                x[j] += o[j];
            }
        }
        layernorm_vec(&x, &self.model.lnf_g.data, &self.model.lnf_b.data, &mut hn);
        let mut logits = vec![0.0f32; CODEBOOK_SIZE];
        affine(&hn, &self.model.head_w, &self.model.head_b, &mut logits);
        self.pos += 1;
        Ok(logits)
    }
}

/// Softmax(logits / temperature) draw; temperature <= 0 degenerates to argmax.
pub fn sample_from_logits(rng: &mut ChaCha8Rng, logits: &[f32], temperature: f32) -> usize {
    if temperature <= 0.0 {
        let mut best = 0;
        for j in 1..logits.len() {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        return best;
    }
    let mut p: Vec<f32> = logits.iter().map(|l| l / temperature).collect();
    k::softmax_inplace(&mut p);
    rng::sample_categorical(rng, &p)
}

/// Autoregressive sampling prompted by a class token: z_1 uniform, the rest
/// from the model, 512 codeword tokens out.
pub fn generate(model: &Dot, class: u8, seed: u64, temperature: f32) -> Result<TokenSeq> {
    if class as usize >= crate::tokens::NUM_CLASS_TOKENS {
        return Err(CoreError::InvalidArgument(format!("class {class}")));
    }
    use rand::Rng;
    let mut r = rng::seeded(rng::derive_seed(seed, &[0x93e, class as u64]));
    let z1 = r.gen_range(0..CODEBOOK_SIZE) as u8;
    generate_with_first(model, class, z1, &mut r, temperature)
}

/// Continuation of a fixed (class, z_1) prompt.
pub fn generate_with_first(
    model: &Dot,
    class: u8,
    z1: u8,
    r: &mut ChaCha8Rng,
    temperature: f32,
) -> Result<TokenSeq> {
    let mut s = Sampler::new(model);
    s.step(class_token(class))?; // prediction above the class position is unused
    let mut tokens = vec![z1];
    let mut logits = s.step(z1 as u16)?;
    while tokens.len() < LATENT_LEN {
        let next = sample_from_logits(r, &logits, temperature) as u8;
        tokens.push(next);
        if tokens.len() < LATENT_LEN {
            logits = s.step(next as u16)?;
        }
    }
    Ok(TokenSeq { tokens, label: class })
}

/// Codebook lookup + VQ-VAE decode of a generated sequence.
pub fn detokenize(seq: &TokenSeq, vq: &Vqvae) -> Result<IQFrame> {
    vq.decode_tokens(seq)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DotEpochLog {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    pub overfit_warning: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DotTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub val_frac: f64,
}

impl Default for DotTrainConfig {
    fn default() -> Self {
        DotTrainConfig { epochs: 100, batch: 32, lr: 3e-3, seed: 0, val_frac: 0.1 }
    }
}

pub struct DotTrainOutput {
    pub model: Dot,
    pub log: Vec<DotEpochLog>,
}

pub fn train_dot(
    pairs: &[TrainPair],
    model_cfg: DotConfig,
    cfg: &DotTrainConfig,
) -> Result<DotTrainOutput> {
    if pairs.is_empty() {
        return Err(CoreError::InvalidArgument("empty pair set".into()));
    }
    let mut model = Dot::new(model_cfg, cfg.seed)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut adam = AdamState::new(cfg.lr, &sizes);

    let n_val = ((pairs.len() as f64 * cfg.val_frac) as usize).min(pairs.len() - 1);
    // Token corpora arrive grouped by class, so shuffle before carving off
    // the held-out slice or it would track a single class.
    let mut split: Vec<usize> = (0..pairs.len()).collect();
    vqvae::shuffle(&mut split, rng::derive_seed(cfg.seed, &[0x5b17]));
    let val: Vec<TrainPair> = split[..n_val].iter().map(|i| pairs[*i].clone()).collect();
    let train: Vec<TrainPair> = split[n_val..].iter().map(|i| pairs[*i].clone()).collect();
    let (val, train) = (&val[..], &train[..]);
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut log: Vec<DotEpochLog> = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    let mut rising_val = 0usize;

    for epoch in 0..cfg.epochs {
        vqvae::shuffle(&mut order, rng::derive_seed(cfg.seed, &[0xd07e, epoch as u64]));
        let mut ce_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let vars = model.insert_params(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for (bi, pi) in chunk.iter().enumerate() {
                let ds = if model.config.dropout > 0.0 {
                    Some(rng::derive_seed(cfg.seed, &[0xd20, step, bi as u64]))
                } else {
                    None
                };
                let l = model.pair_loss_t(&mut tape, &vars, &train[*pi], ds)?;
                ce_sum += tape.value(l).item() as f64;
                losses.push(l);
            }
            let loss = vqvae::mean_of(&mut tape, &losses)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(CoreError::Divergence(format!("dot loss became {lv} at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            let vorder = Dot::var_order(&vars);
            let gvecs: Vec<Vec<f32>> = vorder
                .iter()
                .zip(model.params().iter())
                .map(|(v, p)| grads.of(*v, p.numel()))
                .collect();
            adam.lr = scheduled_lr(cfg.lr, step, total_steps);
            adam.step(&mut model.params_mut(), &gvecs)?;
            step += 1;
        }
        let train_ce = ce_sum / train.len() as f64;
        let val_ce = if val.is_empty() { train_ce } else { validate_dot(&model, val)? };

        // overfitting guard: val rising while train keeps falling
        let prev = log.last();
        let val_rose = prev.map_or(false, |p: &DotEpochLog| val_ce > p.val_ce);
        let train_fell = prev.map_or(false, |p| train_ce < p.train_ce);
        rising_val = if val_rose && train_fell { rising_val + 1 } else { 0 };
        let entry = DotEpochLog { epoch, train_ce, val_ce, overfit_warning: rising_val >= 10 };
        if best.as_ref().map_or(true, |(b, _)| val_ce < *b) {
            best = Some((val_ce, model.params().iter().map(|p| (*p).clone()).collect()));
        }
        log.push(entry);
    }

    if let Some((_, snapshot)) = best {
        for (p, s) in model.params_mut().into_iter().zip(snapshot.into_iter()) {
            p.data = s.data;
        }
    }
    Ok(DotTrainOutput { model, log })
}

fn validate_dot(model: &Dot, val: &[TrainPair]) -> Result<f64> {
    let mut total = 0.0;
    for p in val {
        let mut tape = Tape::new();
        let vars = model.insert_params(&mut tape);
        let l = model.pair_loss_t(&mut tape, &vars, p, None)?;
        total += tape.value(l).item() as f64;
    }
    Ok(total / val.len() as f64)
}
