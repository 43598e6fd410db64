//! Latent token corpus: frames -> codeword sequences, plus the shifted
//! (x, y) pairs the transformer trains on.

use crate::artifact::TokenSeq;
use crate::dataset::IQFrame;
use crate::error::{CoreError, Result};
use crate::rng;
use crate::vqvae::{QuantizeMode, Vqvae, CODEBOOK_SIZE, LATENT_LEN};

pub const NUM_CLASS_TOKENS: usize = 6;
pub const VOCAB_SIZE: usize = CODEBOOK_SIZE + NUM_CLASS_TOKENS; // 134

pub fn class_token(label: u8) -> u16 {
    CODEBOOK_SIZE as u16 + label as u16
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPair {
    /// class token followed by codewords z_1..z_{511}
    pub x_seq: Vec<u16>,
    /// codewords z_2..z_{512}
    pub y_seq: Vec<u16>,
}

/// Tokenize every frame through the encoder + stochastic quantizer. Sampling
/// seeds are derived per frame, so the corpus is a pure function of
/// (dataset, model, seed).
pub fn encode_corpus(frames: &[IQFrame], model: &Vqvae, seed: u64) -> Result<Vec<TokenSeq>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mode = QuantizeMode::Stochastic {
                seed: rng::derive_seed(seed, &[0x7031c5, i as u64]),
            };
            let (_, seq) = model.reconstruct(f, mode)?;
            Ok(seq)
        })
        .collect()
}

pub fn make_pairs(seq: &TokenSeq) -> Result<TrainPair> {
    if seq.tokens.len() != LATENT_LEN {
        return Err(CoreError::InvalidArgument(format!(
            "sequence length {} != {LATENT_LEN}",
            seq.tokens.len()
        )));
    }
    if seq.label as usize >= NUM_CLASS_TOKENS {
        return Err(CoreError::InvalidArgument(format!("label {} out of range", seq.label)));
    }
    if let Some(bad) = seq.tokens.iter().find(|t| **t as usize >= CODEBOOK_SIZE) {
        return Err(CoreError::InvalidArgument(format!("token {bad} out of codeword range")));
    }
    let mut x_seq = Vec::with_capacity(LATENT_LEN);
    x_seq.push(class_token(seq.label));
    x_seq.extend(seq.tokens[..LATENT_LEN - 1].iter().map(|t| *t as u16));
    let y_seq: Vec<u16> = seq.tokens[1..].iter().map(|t| *t as u16).collect();
    Ok(TrainPair { x_seq, y_seq })
}

/// Per-class codeword usage counts over a corpus: [6][128].
pub fn token_histograms(seqs: &[TokenSeq]) -> [[u64; CODEBOOK_SIZE]; NUM_CLASS_TOKENS] {
    let mut h = [[0u64; CODEBOOK_SIZE]; NUM_CLASS_TOKENS];
    for s in seqs {
        for t in &s.tokens {
            h[s.label as usize][*t as usize] += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_dataset;
    use crate::vqvae::VqvaeConfig;

    #[test]
    fn pair_definition_with_offset() {
        let tokens: Vec<u8> = (0..LATENT_LEN).map(|i| (i % CODEBOOK_SIZE) as u8).collect();
        let seq = TokenSeq { tokens: tokens.clone(), label: 3 };
        let p = make_pairs(&seq).unwrap();
        assert_eq!(p.x_seq[0], 131);
        assert_eq!(p.x_seq.len(), 512);
        assert_eq!(p.y_seq.len(), 511);
        assert_eq!(&p.x_seq[1..], &tokens[..511].iter().map(|t| *t as u16).collect::<Vec<_>>()[..]);
        assert_eq!(p.y_seq, tokens[1..].iter().map(|t| *t as u16).collect::<Vec<_>>());
    }

    #[test]
    fn shift_overlap_identity() {
        let tokens: Vec<u8> = (0..LATENT_LEN).map(|i| ((i * 37 + 5) % CODEBOOK_SIZE) as u8).collect();
        let p = make_pairs(&TokenSeq { tokens, label: 0 }).unwrap();
        for k in 1..=510 {
            assert_eq!(p.x_seq[k + 1], p.y_seq[k - 1], "overlap broken at k={k}");
        }
    }

    #[test]
    fn vocabulary_split() {
        let frames = build_dataset(2, 19, None).unwrap();
        let model = Vqvae::new(VqvaeConfig::default(), 19).unwrap();
        let corpus = encode_corpus(&frames, &model, 42).unwrap();
        assert_eq!(corpus.len(), frames.len());
        for seq in &corpus {
            assert_eq!(seq.tokens.len(), LATENT_LEN);
            assert!(seq.tokens.iter().all(|t| (*t as usize) < CODEBOOK_SIZE));
            let p = make_pairs(seq).unwrap();
            let ct = p.x_seq[0] as usize;
            assert!((CODEBOOK_SIZE..VOCAB_SIZE).contains(&ct));
            assert!(p.x_seq[1..].iter().all(|t| (*t as usize) < CODEBOOK_SIZE));
            assert!(p.y_seq.iter().all(|t| (*t as usize) < CODEBOOK_SIZE));
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let frames = build_dataset(1, 23, None).unwrap();
        let model = Vqvae::new(VqvaeConfig::default(), 23).unwrap();
        let a = encode_corpus(&frames, &model, 5).unwrap();
        let b = encode_corpus(&frames, &model, 5).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.label, y.label);
        }
        let c = encode_corpus(&frames, &model, 6).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.tokens != y.tokens));
    }

    #[test]
    fn detokenize_matches_reconstruction() {
        // codebook lookup + decoder over corpus tokens must equal the
        // VQ-VAE's own reconstruction bit for bit
        let frames = build_dataset(1, 31, None).unwrap();
        let model = Vqvae::new(VqvaeConfig::default(), 31).unwrap();
        let corpus = encode_corpus(&frames, &model, 9).unwrap();
        for (f, seq) in frames.iter().zip(&corpus) {
            let mode = QuantizeMode::Stochastic {
                seed: rng::derive_seed(9, &[0x7031c5, frames.iter().position(|g| std::ptr::eq(g, f)).unwrap() as u64]),
            };
            let (recon, seq2) = model.reconstruct(f, mode).unwrap();
            assert_eq!(seq.tokens, seq2.tokens);
            let decoded = model.decode_tokens(seq).unwrap();
            assert_eq!(decoded.i, recon.i);
            assert_eq!(decoded.q, recon.q);
        }
    }

    #[test]
    fn rejects_bad_sequences() {
        assert!(make_pairs(&TokenSeq { tokens: vec![0; 100], label: 0 }).is_err());
        assert!(make_pairs(&TokenSeq { tokens: vec![0; 512], label: 6 }).is_err());
    }

    #[test]
    fn histograms_count_per_class() {
        let seqs = vec![
            TokenSeq { tokens: vec![7; LATENT_LEN], label: 2 },
            TokenSeq { tokens: vec![9; LATENT_LEN], label: 2 },
            TokenSeq { tokens: vec![0; LATENT_LEN], label: 5 },
        ];
        let h = token_histograms(&seqs);
        assert_eq!(h[2][7], LATENT_LEN as u64);
        assert_eq!(h[2][9], LATENT_LEN as u64);
        assert_eq!(h[5][0], LATENT_LEN as u64);
        assert_eq!(h[0].iter().sum::<u64>(), 0);
    }
}
