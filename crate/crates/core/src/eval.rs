//! Report assembly: accuracy tables, codebook-usage exports, constellation
//! CSVs, and the combined metric report.

use crate::artifact::TokenSeq;
use crate::classifier::Classifier;
use crate::dataset::{IQFrame, NUM_CLASSES};
use crate::error::{CoreError, Result};
use crate::kde::{KdeConfig, TopprScores};
use crate::tokens::token_histograms;
use crate::vqvae::CODEBOOK_SIZE;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub dataset: String,
    pub overall: f64,
    /// None for classes absent from the dataset
    pub per_class: [Option<f64>; NUM_CLASSES],
}

/// Frames are scored against their stored label (for fakes: the prompted
/// class).
pub fn accuracy_table(
    classifier: &Classifier,
    datasets: &[(String, &[IQFrame])],
) -> Result<Vec<AccuracyRow>> {
    let mut rows = Vec::with_capacity(datasets.len());
    for (name, frames) in datasets {
        if frames.is_empty() {
            return Err(CoreError::InvalidArgument(format!("dataset {name} is empty")));
        }
        let mut hits = [0usize; NUM_CLASSES];
        let mut totals = [0usize; NUM_CLASSES];
        for f in frames.iter() {
            let c = f.label as usize;
            totals[c] += 1;
            if classifier.predict(f)? == f.label {
                hits[c] += 1;
            }
        }
        let overall =
            hits.iter().sum::<usize>() as f64 / totals.iter().sum::<usize>() as f64;
        let mut per_class = [None; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            if totals[c] > 0 {
                per_class[c] = Some(hits[c] as f64 / totals[c] as f64);
            }
        }
        rows.push(AccuracyRow { dataset: name.clone(), overall, per_class });
    }
    Ok(rows)
}

/// Per-class codeword counts, exportable as CSV (rows: codeword, columns:
/// class counts).
pub fn codebook_histogram(seqs: &[TokenSeq]) -> [[u64; CODEBOOK_SIZE]; NUM_CLASSES] {
    token_histograms(seqs)
}

pub fn write_histogram_csv(
    path: &Path,
    counts: &[[u64; CODEBOOK_SIZE]; NUM_CLASSES],
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "codeword,class0,class1,class2,class3,class4,class5")?;
    for k in 0..CODEBOOK_SIZE {
        let row: Vec<String> = (0..NUM_CLASSES).map(|c| counts[c][k].to_string()).collect();
        writeln!(f, "{k},{}", row.join(","))?;
    }
    Ok(())
}

/// Total-variation distance between two per-class codeword distributions.
pub fn tv_distance(a: &[u64; CODEBOOK_SIZE], b: &[u64; CODEBOOK_SIZE]) -> f64 {
    let (sa, sb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if sa == 0.0 || sb == 0.0 {
        return 1.0;
    }
    0.5 * (0..CODEBOOK_SIZE)
        .map(|k| (a[k] as f64 / sa - b[k] as f64 / sb).abs())
        .sum::<f64>()
}

/// One CSV per class: "I,Q" rows pooled over that class's frames.
pub fn constellation_export(frames: &[IQFrame], dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in 0..NUM_CLASSES {
        let path = dir.join(format!("{prefix}_class{c}.csv"));
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "I,Q")?;
        for frame in frames.iter().filter(|f| f.label as usize == c) {
            for (i, q) in frame.i.iter().zip(frame.q.iter()) {
                writeln!(f, "{i},{q}")?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub toppr: TopprScores,
    pub accuracy: Vec<AccuracyRow>,
    /// per-class TV distance between corpus and fake token usage
    pub token_tv: Option<[f64; NUM_CLASSES]>,
    pub kde_config: KdeConfig,
    pub config_echo: serde_json::Value,
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{train_classifier, ClassifierTrainConfig};
    use crate::dataset::{build_dataset, FRAME_LEN};
    use crate::vqvae::LATENT_LEN;

    #[test]
    fn histogram_csv_and_conservation() {
        let seqs = vec![
            TokenSeq { tokens: vec![5; LATENT_LEN], label: 1 },
            TokenSeq { tokens: (0..LATENT_LEN).map(|i| (i % 4) as u8).collect(), label: 3 },
        ];
        let h = codebook_histogram(&seqs);
        assert_eq!(h[1][5], 512);
        let total: u64 = h.iter().flatten().sum();
        assert_eq!(total, 512 * seqs.len() as u64);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hist.csv");
        write_histogram_csv(&p, &h).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "codeword,class0,class1,class2,class3,class4,class5");
        assert_eq!(text.lines().count(), 1 + CODEBOOK_SIZE);
        assert!(text.lines().nth(6).unwrap().starts_with("5,0,512,"));
    }

    #[test]
    fn tv_distance_bounds() {
        let mut a = [0u64; CODEBOOK_SIZE];
        let mut b = [0u64; CODEBOOK_SIZE];
        a[0] = 10;
        b[0] = 20;
        assert_eq!(tv_distance(&a, &b), 0.0); // same distribution
        b[0] = 0;
        b[1] = 7;
        assert_eq!(tv_distance(&a, &b), 1.0); // disjoint support
        assert_eq!(tv_distance(&a, &[0; CODEBOOK_SIZE]), 1.0); // empty side
    }

    #[test]
    fn constellation_rows() {
        let frames = build_dataset(1, 3, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        constellation_export(&frames, dir.path(), "real").unwrap();
        let text = std::fs::read_to_string(dir.path().join("real_class2.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), "I,Q");
        assert_eq!(text.lines().count(), 1 + FRAME_LEN);
    }

    #[test]
    fn psk16_constellation_on_unit_circle() {
        // after unit-power normalization the symbol-center samples of a PSK
        // frame sit in a thin annulus (intermediate samples carry pulse ISI)
        let frames = build_dataset(4, 9, None).unwrap();
        let psk: Vec<&IQFrame> = frames.iter().filter(|f| f.label == 2).collect();
        let sps = crate::modulation::SPS;
        let mut inside = 0usize;
        let mut total = 0usize;
        for f in &psk {
            // frames are windowed at a random symbol phase: recover it by
            // picking the offset whose samples hug the circle best
            let (phase, hits) = (0..sps)
                .map(|off| {
                    let n = (off..f.i.len())
                        .step_by(sps)
                        .filter(|&k| {
                            let r = (f.i[k] * f.i[k] + f.q[k] * f.q[k]).sqrt();
                            (r - 1.0).abs() <= 0.15
                        })
                        .count();
                    (off, n)
                })
                .max_by_key(|&(_, n)| n)
                .unwrap();
            inside += hits;
            total += (phase..f.i.len()).step_by(sps).count();
        }
        assert!(inside as f64 / total as f64 >= 0.9, "{inside}/{total} on annulus");
    }

    #[test]
    fn accuracy_table_single_class_guard() {
        let frames = build_dataset(8, 21, None).unwrap();
        let mut mixed = Vec::new();
        for i in 0..8 {
            for c in 0..NUM_CLASSES {
                mixed.push(frames[c * 8 + i].clone());
            }
        }
        let cfg = ClassifierTrainConfig {
            epochs: 10,
            batch: 16,
            lr: 3e-3,
            min_accuracy: 0.0,
            ..Default::default()
        };
        let model = train_classifier(&mixed, &cfg).unwrap();
        let only2: Vec<IQFrame> = frames.iter().filter(|f| f.label == 2).cloned().collect();
        let rows = accuracy_table(&model, &[("only2".into(), &only2)]).unwrap();
        assert!(rows[0].per_class[2].is_some());
        for c in [0usize, 1, 3, 4, 5] {
            assert!(rows[0].per_class[c].is_none());
        }
    }
}
