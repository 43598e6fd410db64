//! VQ-VAE over I/Q frames: a strided conv encoder to a 64×512 latent grid, a
//! stochastic vector quantizer over a 128-entry codebook, and a mirrored
//! decoder. Training minimizes reconstruction + quantization + beta-weighted
//! (commitment + KL-to-uniform).

use crate::adam::{scheduled_lr, AdamState};
use crate::artifact::{self, Checkpoint, TokenSeq, MAGIC_VQVAE};
use crate::dataset::{IQFrame, FRAME_LEN};
use crate::error::{CoreError, Result};
use crate::kernels as k;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CODEBOOK_SIZE: usize = 128;
pub const CODE_DIM: usize = 64;
pub const LATENT_LEN: usize = 512;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VqvaeConfig {
    pub beta: f32,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        VqvaeConfig { beta: 0.25 }
    }
}

impl VqvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(CoreError::InvalidArgument(format!(
                "beta must lie in [0,1), got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Sample codewords from the posterior (training and default encoding).
    Stochastic { seed: u64 },
    /// Deterministic nearest-codeword lookup.
    Argmax,
}

#[derive(Debug, Clone)]
struct LayerSpec {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    transposed: bool,
    act: bool,
}

fn encoder_spec() -> Vec<LayerSpec> {
    vec![
        LayerSpec { cin: 2, cout: 32, k: 5, stride: 1, pad: 2, transposed: false, act: true },
        LayerSpec { cin: 32, cout: 64, k: 4, stride: 2, pad: 1, transposed: false, act: true },
        LayerSpec { cin: 64, cout: 64, k: 5, stride: 1, pad: 2, transposed: false, act: true },
        LayerSpec { cin: 64, cout: CODE_DIM, k: 5, stride: 1, pad: 2, transposed: false, act: false },
    ]
}

fn decoder_spec() -> Vec<LayerSpec> {
    vec![
        LayerSpec { cin: CODE_DIM, cout: 64, k: 5, stride: 1, pad: 2, transposed: false, act: true },
        LayerSpec { cin: 64, cout: 64, k: 5, stride: 1, pad: 2, transposed: false, act: true },
        LayerSpec { cin: 64, cout: 32, k: 4, stride: 2, pad: 1, transposed: true, act: true },
        LayerSpec { cin: 32, cout: 2, k: 5, stride: 1, pad: 2, transposed: false, act: false },
    ]
}

#[derive(Debug, Clone)]
struct ConvLayer {
    spec: LayerSpec,
    w: Tensor,
    b: Tensor,
}

impl ConvLayer {
    fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let wshape = if spec.transposed {
            vec![spec.cin, spec.cout, spec.k]
        } else {
            vec![spec.cout, spec.cin, spec.k]
        };
        let fan_in = spec.cin * spec.k;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n: usize = wshape.iter().product();
        let w = Tensor::from_vec(&wshape, rng::uniform_vec(rng, n, -bound, bound))
            .unwrap()
            .param();
        let b = Tensor::zeros(&[spec.cout]).param();
        ConvLayer { spec, w, b }
    }
}

/// Trained VQ-VAE parameters.
pub struct Vqvae {
    pub config: VqvaeConfig,
    enc: Vec<ConvLayer>,
    dec: Vec<ConvLayer>,
    pub codebook: Tensor,
}

pub struct VqvaeVars {
    enc: Vec<(Var, Var)>,
    dec: Vec<(Var, Var)>,
    pub codebook: Var,
}

/// Loss nodes and sampled tokens for one frame's forward pass.
pub struct VqvaeForward {
    pub total: Var,
    pub rec: Var,
    pub quant: Var,
    pub commit: Var,
    pub kl: Var,
    pub recon: Var,
    pub posterior: Var,
    pub tokens: Vec<u8>,
}

impl Vqvae {
    pub fn new(config: VqvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(rng::derive_seed(seed, &[0x56515641]));
        let enc = encoder_spec().into_iter().map(|s| ConvLayer::init(s, &mut r)).collect();
        let dec = decoder_spec().into_iter().map(|s| ConvLayer::init(s, &mut r)).collect();
        let bound = 1.0 / (CODE_DIM as f32).sqrt();
        let codebook = Tensor::from_vec(
            &[CODEBOOK_SIZE, CODE_DIM],
            rng::uniform_vec(&mut r, CODEBOOK_SIZE * CODE_DIM, -bound, bound),
        )?
        .param();
        Ok(Vqvae { config, enc, dec, codebook })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.enc.len() {
            names.push(format!("enc{i}.w"));
            names.push(format!("enc{i}.b"));
        }
        for i in 0..self.dec.len() {
            names.push(format!("dec{i}.w"));
            names.push(format!("dec{i}.b"));
        }
        names.push("codebook".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for l in &self.enc {
            p.push(&l.w);
            p.push(&l.b);
        }
        for l in &self.dec {
            p.push(&l.w);
            p.push(&l.b);
        }
        p.push(&self.codebook);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for l in &mut self.enc {
            p.push(&mut l.w);
            p.push(&mut l.b);
        }
        for l in &mut self.dec {
            p.push(&mut l.w);
            p.push(&mut l.b);
        }
        p.push(&mut self.codebook);
        p
    }

    pub fn insert_params(&self, tape: &mut Tape) -> VqvaeVars {
        let enc = self
            .enc
            .iter()
            .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
            .collect();
        let dec = self
            .dec
            .iter()
            .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
            .collect();
        let codebook = tape.leaf(self.codebook.clone());
        VqvaeVars { enc, dec, codebook }
    }

    fn stack(
        &self,
        tape: &mut Tape,
        layers: &[ConvLayer],
        vars: &[(Var, Var)],
        mut h: Var,
    ) -> Result<Var> {
        for (l, (w, b)) in layers.iter().zip(vars.iter()) {
            h = if l.spec.transposed {
                tape.convt1d(h, *w, *b, l.spec.stride, l.spec.pad)?
            } else {
                tape.conv1d(h, *w, *b, l.spec.stride, l.spec.pad)?
            };
            if l.spec.act {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// E(x): [2×1024] -> [64×512]
    pub fn encode_t(&self, tape: &mut Tape, vars: &VqvaeVars, x: Var) -> Result<Var> {
        self.stack(tape, &self.enc, &vars.enc, x)
    }

    /// D(z_q): [64×512] -> [2×1024]
    pub fn decode_t(&self, tape: &mut Tape, vars: &VqvaeVars, zq: Var) -> Result<Var> {
        self.stack(tape, &self.dec, &vars.dec, zq)
    }

    /// Full training-graph forward for one frame. `sample_seed` drives the
    /// stochastic codeword selection; `Argmax` is the deterministic variant.
    pub fn forward_t(
        &self,
        tape: &mut Tape,
        vars: &VqvaeVars,
        x_frame: &Tensor,
        mode: QuantizeMode,
    ) -> Result<VqvaeForward> {
        let x = tape.constant(x_frame.clone());
        let z = self.encode_t(tape, vars, x)?;
        let zt = tape.transpose2d(z); // [512×64] slices as rows
        let d2 = tape.pairwise_sqdist(zt, vars.codebook)?;
        let neg = tape.scale(d2, -1.0);
        let posterior = tape.softmax_rows(neg);
        let tokens = select_tokens(tape.value(posterior), mode);
        let idx: Vec<usize> = tokens.iter().map(|t| *t as usize).collect();
        let zq = tape.embedding(vars.codebook, &idx)?; // [512×64]

        let numel = (LATENT_LEN * CODE_DIM) as f32;
        let sg_zt = tape.stop_grad(zt);
        let sg_zq = tape.stop_grad(zq);
        let dq = tape.sub(sg_zt, zq)?;
        let dq2 = tape.mul(dq, dq)?;
        let sq = tape.sum(dq2);
        let quant = tape.scale(sq, 1.0 / numel);
        let dc = tape.sub(zt, sg_zq)?;
        let dc2 = tape.mul(dc, dc)?;
        let sc = tape.sum(dc2);
        let commit = tape.scale(sc, 1.0 / numel);

        // straight-through: forward z_q verbatim, backward identity to z
        let st = tape.straight_through(zt, zq)?;
        let st_grid = tape.transpose2d(st); // back to [64×512]
        let recon = self.decode_t(tape, vars, st_grid)?;

        let dr = tape.sub(x, recon)?;
        let dr2 = tape.mul(dr, dr)?;
        let sr = tape.sum(dr2);
        let rec = tape.scale(sr, 1.0 / FRAME_LEN as f32);

        let xlx = tape.xlogx(posterior);
        let sx = tape.sum(xlx);
        let mean_neg_ent = tape.scale(sx, 1.0 / LATENT_LEN as f32);
        let kl = tape.add_scalar(mean_neg_ent, (CODEBOOK_SIZE as f32).ln());

        let rq = tape.add(rec, quant)?;
        let ck = tape.add(commit, kl)?;
        let bck = tape.scale(ck, self.config.beta);
        let total = tape.add(rq, bck)?;
        Ok(VqvaeForward { total, rec, quant, commit, kl, recon, posterior, tokens })
    }

    /// Encode one frame to tokens and its reconstruction (no gradients kept).
    pub fn reconstruct(&self, frame: &IQFrame, mode: QuantizeMode) -> Result<(IQFrame, TokenSeq)> {
        let mut tape = Tape::new();
        let vars = self.insert_params(&mut tape);
        let fwd = self.forward_t(&mut tape, &vars, &frame.to_tensor(), mode)?;
        let recon = IQFrame::from_tensor(tape.value(fwd.recon), frame.label)?;
        Ok((recon, TokenSeq { tokens: fwd.tokens, label: frame.label }))
    }

    /// Decode a token sequence through codebook lookup + decoder.
    pub fn decode_tokens(&self, seq: &TokenSeq) -> Result<IQFrame> {
        if seq.tokens.len() != LATENT_LEN {
            return Err(CoreError::InvalidArgument(format!(
                "token sequence length {} != {LATENT_LEN}",
                seq.tokens.len()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.insert_params(&mut tape);
        let idx: Vec<usize> = seq.tokens.iter().map(|t| *t as usize).collect();
        let zq = tape.embedding(vars.codebook, &idx)?;
        let grid = tape.transpose2d(zq);
        let out = self.decode_t(&mut tape, &vars, grid)?;
        IQFrame::from_tensor(tape.value(out), seq.label)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "config": self.config,
            "codebook_size": CODEBOOK_SIZE,
            "code_dim": CODE_DIM,
            "latent_len": LATENT_LEN,
        });
        let names = self.param_names();
        let params = self.params();
        let tensors: Vec<(String, &Tensor)> =
            names.into_iter().zip(params.into_iter()).collect();
        artifact::write_checkpoint(path, MAGIC_VQVAE, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck: Checkpoint = artifact::read_checkpoint(path, MAGIC_VQVAE)?;
        let config: VqvaeConfig = serde_json::from_value(ck.header["config"].clone())?;
        let mut model = Vqvae::new(config, 0)?;
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

/// Posterior over codewords for each latent slice: softmax of -||z_i - e_k||^2
/// (the max-shift in the softmax realizes the numerically stable
/// subtract-min-distance form).
pub fn posterior_rows(slices: &Tensor, codebook: &Tensor) -> Tensor {
    let (n, d) = (slices.rows(), slices.cols());
    let m = codebook.rows();
    let mut out = vec![0.0; n * m];
    k::gemm_nt(&mut out, &slices.data, &codebook.data, n, d, m);
    for i in 0..n {
        let na = k::dot(&slices.data[i * d..(i + 1) * d], &slices.data[i * d..(i + 1) * d]);
        for j in 0..m {
            let nb = k::dot(&codebook.data[j * d..(j + 1) * d], &codebook.data[j * d..(j + 1) * d]);
            out[i * m + j] = -(na + nb - 2.0 * out[i * m + j]);
        }
        k::softmax_inplace(&mut out[i * m..(i + 1) * m]);
    }
    Tensor::from_vec(&[n, m], out).unwrap()
}

fn select_tokens(posterior: &Tensor, mode: QuantizeMode) -> Vec<u8> {
    let (n, m) = (posterior.rows(), posterior.cols());
    match mode {
        QuantizeMode::Argmax => (0..n)
            .map(|i| {
                let row = &posterior.data[i * m..(i + 1) * m];
                let mut best = 0;
                for j in 1..m {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect(),
        QuantizeMode::Stochastic { seed } => {
            let mut r = rng::seeded(seed);
            (0..n)
                .map(|i| rng::sample_categorical(&mut r, &posterior.data[i * m..(i + 1) * m]) as u8)
                .collect()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqvaeEpochLog {
    pub epoch: usize,
    pub rec: f64,
    pub quant: f64,
    pub commit: f64,
    pub kl: f64,
    pub total: f64,
    pub val_total: f64,
    pub codebook_entropy: f64,
    pub distinct_codes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqvaeTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub val_frac: f64,
}

impl Default for VqvaeTrainConfig {
    fn default() -> Self {
        VqvaeTrainConfig { epochs: 100, batch: 32, lr: 2e-3, seed: 0, val_frac: 0.1 }
    }
}

pub struct VqvaeTrainOutput {
    pub model: Vqvae,
    pub log: Vec<VqvaeEpochLog>,
}

/// Shannon entropy (nats) of a token count histogram.
pub fn histogram_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut h = 0.0;
    for c in counts {
        if *c > 0 {
            let p = *c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h
}

pub fn train_vqvae(
    frames: &[IQFrame],
    model_cfg: VqvaeConfig,
    cfg: &VqvaeTrainConfig,
) -> Result<VqvaeTrainOutput> {
    if frames.is_empty() {
        return Err(CoreError::InvalidArgument("empty training set".into()));
    }
    let mut model = Vqvae::new(model_cfg, cfg.seed)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut adam = AdamState::new(cfg.lr, &sizes);

    let n_val = ((frames.len() as f64 * cfg.val_frac) as usize).min(frames.len() - 1);
    // Datasets arrive grouped by class, so shuffle before carving off the
    // held-out slice or it would track a single class.
    let mut split: Vec<usize> = (0..frames.len()).collect();
    shuffle(&mut split, rng::derive_seed(cfg.seed, &[0x5b17]));
    let val: Vec<IQFrame> = split[..n_val].iter().map(|i| frames[*i].clone()).collect();
    let train: Vec<IQFrame> = split[n_val..].iter().map(|i| frames[*i].clone()).collect();
    let (val, train) = (&val[..], &train[..]);
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, rng::derive_seed(cfg.seed, &[0xe90c, epoch as u64]));
        let mut sums = [0.0f64; 5]; // rec, quant, commit, kl, total
        let mut token_counts = vec![0u64; CODEBOOK_SIZE];
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let vars = model.insert_params(&mut tape);
            let mut batch_losses = Vec::with_capacity(chunk.len());
            for (bi, fi) in chunk.iter().enumerate() {
                let mode = QuantizeMode::Stochastic {
                    seed: rng::derive_seed(cfg.seed, &[0x5a3c, step, bi as u64]),
                };
                let fwd = model.forward_t(&mut tape, &vars, &train[*fi].to_tensor(), mode)?;
                sums[0] += tape.value(fwd.rec).item() as f64;
                sums[1] += tape.value(fwd.quant).item() as f64;
                sums[2] += tape.value(fwd.commit).item() as f64;
                sums[3] += tape.value(fwd.kl).item() as f64;
                sums[4] += tape.value(fwd.total).item() as f64;
                for t in &fwd.tokens {
                    token_counts[*t as usize] += 1;
                }
                batch_losses.push(fwd.total);
            }
            let loss = mean_of(&mut tape, &batch_losses)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(CoreError::Divergence(format!(
                    "vqvae loss became {lv} at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            let gvecs: Vec<Vec<f32>> = {
                let params = model.params();
                let mut vars_all: Vec<Var> = Vec::new();
                for (w, b) in &vars.enc {
                    vars_all.push(*w);
                    vars_all.push(*b);
                }
                for (w, b) in &vars.dec {
                    vars_all.push(*w);
                    vars_all.push(*b);
                }
                vars_all.push(vars.codebook);
                vars_all
                    .iter()
                    .zip(params.iter())
                    .map(|(v, p)| grads.of(*v, p.numel()))
                    .collect()
            };
            adam.lr = scheduled_lr(cfg.lr, step, total_steps);
            adam.step(&mut model.params_mut(), &gvecs)?;
            step += 1;
        }

        let denom = train.len() as f64;
        let val_total = if val.is_empty() {
            sums[4] / denom
        } else {
            validate_vqvae(&model, val, cfg.seed)?
        };
        let entry = VqvaeEpochLog {
            epoch,
            rec: sums[0] / denom,
            quant: sums[1] / denom,
            commit: sums[2] / denom,
            kl: sums[3] / denom,
            total: sums[4] / denom,
            val_total,
            codebook_entropy: histogram_entropy(&token_counts),
            distinct_codes: token_counts.iter().filter(|c| **c > 0).count(),
        };
        if best.as_ref().map_or(true, |(b, _)| val_total < *b) {
            best = Some((val_total, model.params().iter().map(|p| (*p).clone()).collect()));
        }
        log.push(entry);
    }

    if let Some((_, snapshot)) = best {
        for (p, s) in model.params_mut().into_iter().zip(snapshot.into_iter()) {
            p.data = s.data;
        }
    }
    Ok(VqvaeTrainOutput { model, log })
}

fn validate_vqvae(model: &Vqvae, val: &[IQFrame], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, f) in val.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = model.insert_params(&mut tape);
        let mode = QuantizeMode::Stochastic { seed: rng::derive_seed(seed, &[0x7a1, i as u64]) };
        let fwd = model.forward_t(&mut tape, &vars, &f.to_tensor(), mode)?;
        total += tape.value(fwd.total).item() as f64;
    }
    Ok(total / val.len() as f64)
}

pub(crate) fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let mut acc = losses[0];
    for l in &losses[1..] {
        acc = tape.add(acc, *l)?;
    }
    Ok(tape.scale(acc, 1.0 / losses.len() as f32))
}

/// Fisher-Yates with a derived seed.
pub(crate) fn shuffle(order: &mut [usize], seed: u64) {
    use rand::Rng;
    let mut r = rng::seeded(seed);
    for i in (1..order.len()).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_dataset;

    fn toy_frames(per_class: usize) -> Vec<IQFrame> {
        build_dataset(per_class, 7, None).unwrap()
    }

    #[test]
    fn posterior_matches_f64_oracle() {
        let mut r = rng::seeded(3);
        let slices = Tensor::from_vec(&[5, CODE_DIM], rng::normal_vec(&mut r, 5 * CODE_DIM, 1.0)).unwrap();
        let cb =
            Tensor::from_vec(&[CODEBOOK_SIZE, CODE_DIM], rng::normal_vec(&mut r, CODEBOOK_SIZE * CODE_DIM, 1.0))
                .unwrap();
        let got = posterior_rows(&slices, &cb);
        for i in 0..5 {
            let mut logits = vec![0.0f64; CODEBOOK_SIZE];
            for j in 0..CODEBOOK_SIZE {
                let mut d2 = 0.0f64;
                for t in 0..CODE_DIM {
                    let d = slices.data[i * CODE_DIM + t] as f64 - cb.data[j * CODE_DIM + t] as f64;
                    d2 += d * d;
                }
                logits[j] = -d2;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let mut sum = 0.0;
            for j in 0..CODEBOOK_SIZE {
                let want = (logits[j] - mx).exp() / z;
                let have = got.data[i * CODEBOOK_SIZE + j] as f64;
                assert!((want - have).abs() < 1e-5, "row {i} col {j}: {want} vs {have}");
                sum += have;
            }
            assert!((sum - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn posterior_peaks_at_nearest_codeword() {
        let mut r = rng::seeded(11);
        let cb = Tensor::from_vec(
            &[CODEBOOK_SIZE, CODE_DIM],
            rng::normal_vec(&mut r, CODEBOOK_SIZE * CODE_DIM, 1.0),
        )
        .unwrap();
        // take a point very close to codeword 17
        let mut s = cb.data[17 * CODE_DIM..18 * CODE_DIM].to_vec();
        s[0] += 1e-3;
        let slices = Tensor::from_vec(&[1, CODE_DIM], s).unwrap();
        let p = posterior_rows(&slices, &cb);
        let argmax = (0..CODEBOOK_SIZE).max_by(|a, b| p.data[*a].total_cmp(&p.data[*b])).unwrap();
        assert_eq!(argmax, 17);
    }

    #[test]
    fn stochastic_sampling_tracks_posterior() {
        // two codewords equidistant except a known gap; empirical frequency
        // must match the analytic posterior within 3 sigma
        let mut cbv = vec![0.0f32; CODEBOOK_SIZE * CODE_DIM];
        cbv[0] = 0.0; // codeword 0 at origin
        cbv[CODE_DIM] = 1.0; // codeword 1 at e_0
        for j in 2..CODEBOOK_SIZE {
            cbv[j * CODE_DIM] = 50.0 + j as f32; // far away
        }
        let cb = Tensor::from_vec(&[CODEBOOK_SIZE, CODE_DIM], cbv).unwrap();
        let slices = Tensor::from_vec(&[1, CODE_DIM], {
            let mut s = vec![0.0f32; CODE_DIM];
            s[0] = 0.3;
            s
        })
        .unwrap();
        let p = posterior_rows(&slices, &cb);
        let p1 = p.data[1] as f64;
        let trials = 4000usize;
        let mut hits = 0usize;
        for t in 0..trials {
            let toks = select_tokens(&p, QuantizeMode::Stochastic { seed: 900 + t as u64 });
            if toks[0] == 1 {
                hits += 1;
            }
        }
        let freq = hits as f64 / trials as f64;
        let sigma = (p1 * (1.0 - p1) / trials as f64).sqrt();
        assert!(
            (freq - p1).abs() < 3.0 * sigma + 1e-9,
            "freq {freq} vs p {p1} (sigma {sigma})"
        );
    }

    #[test]
    fn argmax_mode_is_deterministic() {
        let model = Vqvae::new(VqvaeConfig::default(), 5).unwrap();
        let f = &toy_frames(1)[2];
        let (r1, t1) = model.reconstruct(f, QuantizeMode::Argmax).unwrap();
        let (r2, t2) = model.reconstruct(f, QuantizeMode::Argmax).unwrap();
        assert_eq!(t1.tokens, t2.tokens);
        assert_eq!(r1.i, r2.i);
        let (_, t3) = model
            .reconstruct(f, QuantizeMode::Stochastic { seed: 1 })
            .unwrap();
        let (_, t4) = model
            .reconstruct(f, QuantizeMode::Stochastic { seed: 1 })
            .unwrap();
        assert_eq!(t3.tokens, t4.tokens);
    }

    #[test]
    fn latent_and_recon_shapes() {
        let model = Vqvae::new(VqvaeConfig::default(), 1).unwrap();
        let f = &toy_frames(1)[0];
        let mut tape = Tape::new();
        let vars = model.insert_params(&mut tape);
        let x = tape.constant(f.to_tensor());
        let z = model.encode_t(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(z).shape, vec![CODE_DIM, LATENT_LEN]);
        let fwd = model.forward_t(&mut tape, &vars, &f.to_tensor(), QuantizeMode::Argmax).unwrap();
        assert_eq!(tape.value(fwd.recon).shape, vec![2, FRAME_LEN]);
        assert_eq!(fwd.tokens.len(), LATENT_LEN);
        assert!(fwd.tokens.iter().all(|t| (*t as usize) < CODEBOOK_SIZE));
    }

    #[test]
    fn quant_and_commit_losses_equal_but_route_gradients_apart() {
        let model = Vqvae::new(VqvaeConfig::default(), 9).unwrap();
        let f = &toy_frames(1)[1];
        let mut tape = Tape::new();
        let vars = model.insert_params(&mut tape);
        let fwd = model.forward_t(&mut tape, &vars, &f.to_tensor(), QuantizeMode::Argmax).unwrap();
        let q = tape.value(fwd.quant).item();
        let c = tape.value(fwd.commit).item();
        assert!((q - c).abs() < 1e-6, "quant {q} commit {c}");

        // quant loss updates only the codebook
        let gq = tape.backward(fwd.quant).unwrap();
        let enc_w0 = vars.enc[0].0;
        assert!(gq.get(enc_w0).is_none() || gq.get(enc_w0).unwrap().iter().all(|g| *g == 0.0));
        let cb_g = gq.of(vars.codebook, CODEBOOK_SIZE * CODE_DIM);
        assert!(cb_g.iter().any(|g| g.abs() > 0.0));

        // commit loss updates only the encoder side
        let gc = tape.backward(fwd.commit).unwrap();
        assert!(gc.get(vars.codebook).is_none()
            || gc.get(vars.codebook).unwrap().iter().all(|g| *g == 0.0));
        let ew = gc.of(enc_w0, tape.value(enc_w0).numel());
        assert!(ew.iter().any(|g| g.abs() > 0.0));
    }

    #[test]
    fn straight_through_passes_reconstruction_gradient_to_encoder() {
        let model = Vqvae::new(VqvaeConfig::default(), 13).unwrap();
        let f = &toy_frames(1)[4];
        let mut tape = Tape::new();
        let vars = model.insert_params(&mut tape);
        let fwd = model.forward_t(&mut tape, &vars, &f.to_tensor(), QuantizeMode::Argmax).unwrap();
        let g = tape.backward(fwd.rec).unwrap();
        for (li, (w, _)) in vars.enc.iter().enumerate() {
            let gw = g.of(*w, tape.value(*w).numel());
            assert!(gw.iter().any(|x| x.abs() > 0.0), "encoder layer {li} got no gradient");
        }
        // reconstruction loss must not touch the codebook through the
        // straight-through path
        assert!(g.get(vars.codebook).is_none()
            || g.get(vars.codebook).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn kl_between_zero_and_log_codebook_size() {
        let model = Vqvae::new(VqvaeConfig::default(), 21).unwrap();
        let f = &toy_frames(1)[3];
        let mut tape = Tape::new();
        let vars = model.insert_params(&mut tape);
        let fwd = model.forward_t(&mut tape, &vars, &f.to_tensor(), QuantizeMode::Argmax).unwrap();
        let kl = tape.value(fwd.kl).item();
        let lnn = (CODEBOOK_SIZE as f32).ln();
        assert!(kl >= -1e-4 && kl <= lnn + 1e-4, "kl {kl} outside [0, ln N]");
    }

    #[test]
    fn total_loss_composition() {
        let model = Vqvae::new(VqvaeConfig { beta: 0.25 }, 2).unwrap();
        let f = &toy_frames(1)[0];
        let mut tape = Tape::new();
        let vars = model.insert_params(&mut tape);
        let fwd = model.forward_t(&mut tape, &vars, &f.to_tensor(), QuantizeMode::Argmax).unwrap();
        let total = tape.value(fwd.total).item();
        let want = tape.value(fwd.rec).item()
            + tape.value(fwd.quant).item()
            + 0.25 * (tape.value(fwd.commit).item() + tape.value(fwd.kl).item());
        assert!((total - want).abs() < 1e-4 * want.abs().max(1.0));
    }

    #[test]
    fn beta_validation() {
        assert!(Vqvae::new(VqvaeConfig { beta: 1.5 }, 0).is_err());
        assert!(Vqvae::new(VqvaeConfig { beta: -0.1 }, 0).is_err());
        assert!(Vqvae::new(VqvaeConfig { beta: 0.0 }, 0).is_ok());
    }

    #[test]
    fn latent_perturbation_stays_local() {
        let model = Vqvae::new(VqvaeConfig::default(), 6).unwrap();
        let f = &toy_frames(1)[5];
        let mut xa = f.to_tensor();
        let mut xb = xa.clone();
        let hit = 600usize; // sample index on the I rail
        xb.data[hit] += 0.5;
        let enc = |x: &Tensor| {
            let mut tape = Tape::new();
            let vars = model.insert_params(&mut tape);
            let xv = tape.constant(x.clone());
            let z = model.encode_t(&mut tape, &vars, xv).unwrap();
            tape.value(z).clone()
        };
        let za = enc(&mut xa);
        let zb = enc(&mut xb);
        // stride-2 stack: column j draws on input samples within ~12 of 2j
        for j in 0..LATENT_LEN {
            let changed = (0..CODE_DIM)
                .any(|c| (za.data[c * LATENT_LEN + j] - zb.data[c * LATENT_LEN + j]).abs() > 1e-7);
            if changed {
                let center = hit as f64 / 2.0;
                assert!(
                    (j as f64 - center).abs() <= 8.0,
                    "column {j} changed, outside receptive field of sample {hit}"
                );
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vq.rfvq");
        let model = Vqvae::new(VqvaeConfig::default(), 77).unwrap();
        model.save(&path).unwrap();
        let loaded = Vqvae::load(&path).unwrap();
        let f = &toy_frames(1)[2];
        let (r1, t1) = model.reconstruct(f, QuantizeMode::Argmax).unwrap();
        let (r2, t2) = loaded.reconstruct(f, QuantizeMode::Argmax).unwrap();
        assert_eq!(t1.tokens, t2.tokens);
        assert_eq!(r1.i, r2.i);
        assert_eq!(r1.q, r2.q);
    }

    #[test]
    fn overfits_six_frames() {
        let frames = toy_frames(1);
        let cfg = VqvaeTrainConfig {
            epochs: 60,
            batch: 6,
            lr: 3e-3,
            seed: 4,
            val_frac: 0.0,
        };
        let out = train_vqvae(&frames, VqvaeConfig::default(), &cfg).unwrap();
        let first = out.log.first().unwrap().rec;
        let last = out.log.last().unwrap().rec;
        assert!(
            last < first * 0.65,
            "rec loss did not drop enough: {first} -> {last}"
        );
        assert!(out.log.last().unwrap().distinct_codes >= 2);
    }

    #[test]
    fn histogram_entropy_bounds() {
        assert_eq!(histogram_entropy(&[0; 8]), 0.0);
        assert_eq!(histogram_entropy(&[5, 0, 0, 0]), 0.0);
        let h = histogram_entropy(&[3, 3, 3, 3]);
        assert!((h - (4.0f64).ln()).abs() < 1e-12);
    }
}

