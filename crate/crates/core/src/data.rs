//! Identity-labeled datasets and identity-aware minibatch sampling.
//!
//! Each example carries a class label t and an identity p. The synthetic
//! generator produces small images where the class picks a grating template
//! (orientation + frequency) and the identity applies a fixed color/bias
//! transform; per-sample phase, amplitude, and pixel noise provide the
//! within-identity variation that makes gate dispersion measurable.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::rng::{derive, normal, seeded, uniform};

#[derive(Debug, Clone)]
pub struct Example {
    /// (channels, h, w), standardized.
    pub input: Array3<f32>,
    /// 1-based class label.
    pub class_label: u32,
    /// 1-based identity.
    pub identity: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityParams {
    pub identity: u32,
    pub class_label: u32,
    pub gains: [f64; 3],
    pub offsets: [f64; 3],
    pub bias_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Manifest {
    /// (class, identity) -> example count.
    pub counts: Vec<(u32, u32, usize)>,
    pub identities: Vec<IdentityParams>,
    /// Per-channel (mean, std) used for standardization.
    pub standardization: Vec<(f64, f64)>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: u32,
    pub num_identities: u32,
    pub image_hw: (usize, usize),
    pub manifest: Manifest,
}

impl Dataset {
    /// Per-identity example indices, identity-ordered.
    pub fn by_identity(&self, indices: &[usize]) -> BTreeMap<u32, Vec<usize>> {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            m.entry(self.examples[i].identity).or_default().push(i);
        }
        m
    }

    /// Split into train and held-out portions: the last `holdout_frac` of
    /// each identity's examples is reserved for enrollment and testing.
    pub fn split(&self, holdout_frac: f64) -> (Vec<usize>, Vec<usize>) {
        let all: Vec<usize> = (0..self.examples.len()).collect();
        let per_id = self.by_identity(&all);
        let mut train = Vec::new();
        let mut heldout = Vec::new();
        for (_, idxs) in per_id {
            let n = idxs.len();
            let n_hold = ((n as f64) * holdout_frac).round() as usize;
            let n_train = n - n_hold;
            train.extend_from_slice(&idxs[..n_train]);
            heldout.extend_from_slice(&idxs[n_train..]);
        }
        (train, heldout)
    }

    /// Assemble a batch tensor plus labels (0-based) and identities.
    pub fn gather<F: Scalar>(&self, indices: &[usize]) -> (Array4<F>, Vec<usize>, Vec<u32>) {
        let (h, w) = self.image_hw;
        let c = self.examples[0].input.dim().0;
        let mut x = Array4::<F>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for (bi, &i) in indices.iter().enumerate() {
            let ex = &self.examples[i];
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        x[[bi, ci, hi, wi]] = F::from64(ex.input[[ci, hi, wi]] as f64);
                    }
                }
            }
            labels.push(ex.class_label as usize - 1);
            ids.push(ex.identity);
        }
        (x, labels, ids)
    }

    fn standardize(&mut self, train_indices: &[usize]) {
        let c = self.examples[0].input.dim().0;
        let mut stats = Vec::with_capacity(c);
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for &i in train_indices {
                for v in self.examples[i].input.index_axis(ndarray::Axis(0), ci).iter() {
                    sum += *v as f64;
                    n += 1;
                }
            }
            let mean = sum / n as f64;
            let mut var = 0.0f64;
            for &i in train_indices {
                for v in self.examples[i].input.index_axis(ndarray::Axis(0), ci).iter() {
                    let d = *v as f64 - mean;
                    var += d * d;
                }
            }
            let std = (var / n as f64).sqrt().max(1e-8);
            stats.push((mean, std));
        }
        for ex in &mut self.examples {
            for ci in 0..c {
                let (m, s) = stats[ci];
                ex.input
                    .index_axis_mut(ndarray::Axis(0), ci)
                    .mapv_inplace(|v| ((v as f64 - m) / s) as f32);
            }
        }
        self.manifest.standardization = stats;
    }
}

/// Deterministic synthetic dataset. Classes map to grating templates;
/// identities partition classes evenly when P != K (requires P % K == 0) or
/// coincide with classes when P == K.
pub fn synth_identity_dataset(
    classes: u32,
    identities: u32,
    samples_per_identity: usize,
    noise_level: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 || identities == 0 || samples_per_identity == 0 {
        return Err(Error::Config("all counts must be >= 1".into()));
    }
    if identities != classes && identities % classes != 0 {
        return Err(Error::Config(format!(
            "identities ({identities}) must be a multiple of classes ({classes}) so identities partition evenly"
        )));
    }
    let (h, w) = (16usize, 16usize);
    let mut examples = Vec::with_capacity(identities as usize * samples_per_identity);
    let mut identity_params = Vec::new();
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for p in 1..=identities {
        let class = if identities == classes {
            p
        } else {
            (p - 1) / (identities / classes) + 1
        };
        let mut id_rng = seeded(derive(seed, 0x1d_0000 + p as u64));
        let gains = [
            uniform(&mut id_rng, 0.5, 1.5),
            uniform(&mut id_rng, 0.5, 1.5),
            uniform(&mut id_rng, 0.5, 1.5),
        ];
        let offsets = [
            uniform(&mut id_rng, -0.25, 0.25),
            uniform(&mut id_rng, -0.25, 0.25),
            uniform(&mut id_rng, -0.25, 0.25),
        ];
        let bias_seed = derive(seed, 0xb1a5_0000 + p as u64);
        let bias = identity_bias(bias_seed, h, w);
        identity_params.push(IdentityParams {
            identity: p,
            class_label: class,
            gains,
            offsets,
            bias_seed,
        });
        let mut sample_rng = seeded(derive(seed, 0x5a_0000 + p as u64));
        for _ in 0..samples_per_identity {
            let phase = uniform(&mut sample_rng, 0.0, std::f64::consts::TAU);
            let amp = uniform(&mut sample_rng, 0.7, 1.3);
            let mut img = Array3::<f32>::zeros((3, h, w));
            for hi in 0..h {
                for wi in 0..w {
                    let g = grating(class, classes, hi, wi, h, w, phase);
                    for ci in 0..3 {
                        let v = gains[ci] * amp * g
                            + offsets[ci]
                            + bias[[ci, hi, wi]]
                            + noise_level * normal(&mut sample_rng);
                        img[[ci, hi, wi]] = v as f32;
                    }
                }
            }
            examples.push(Example {
                input: img,
                class_label: class,
                identity: p,
            });
            *counts.entry((class, p)).or_default() += 1;
        }
    }
    let manifest = Manifest {
        counts: counts.into_iter().map(|((c, p), n)| (c, p, n)).collect(),
        identities: identity_params,
        standardization: Vec::new(),
    };
    let mut ds = Dataset {
        examples,
        num_classes: classes,
        num_identities: identities,
        image_hw: (h, w),
        manifest,
    };
    let (train, _) = ds.split(0.25);
    ds.standardize(&train);
    Ok(ds)
}

/// Class template: oriented sinusoidal grating. Orientation and frequency
/// both depend on the class; phase is per-sample.
fn grating(class: u32, classes: u32, hi: usize, wi: usize, h: usize, w: usize, phase: f64) -> f64 {
    let t = (class - 1) as f64;
    let theta = std::f64::consts::PI * t / classes as f64;
    let freq = 2.0 + (t % 2.0) * 1.5;
    let y = hi as f64 / h as f64 - 0.5;
    let x = wi as f64 / w as f64 - 0.5;
    let u = x * theta.cos() + y * theta.sin();
    (std::f64::consts::TAU * freq * u + phase).sin()
}

/// Fixed per-identity additive pattern: a small mixture of low-frequency
/// waves per channel.
fn identity_bias(bias_seed: u64, h: usize, w: usize) -> Array3<f64> {
    let mut rng = seeded(bias_seed);
    let mut bias = Array3::<f64>::zeros((3, h, w));
    for ci in 0..3 {
        for _ in 0..2 {
            let kx = uniform(&mut rng, -1.5, 1.5);
            let ky = uniform(&mut rng, -1.5, 1.5);
            let ph = uniform(&mut rng, 0.0, std::f64::consts::TAU);
            let a = uniform(&mut rng, 0.1, 0.3);
            for hi in 0..h {
                for wi in 0..w {
                    let y = hi as f64 / h as f64;
                    let x = wi as f64 / w as f64;
                    bias[[ci, hi, wi]] += a * (std::f64::consts::TAU * (kx * x + ky * y) + ph).sin();
                }
            }
        }
    }
    bias
}

/// How training batches are composed: a fixed number of identities per
/// batch, a fixed number of samples per identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BatchComposition {
    pub identities_per_batch: usize,
    pub samples_per_identity: usize,
    pub seed: u64,
}

impl BatchComposition {
    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.samples_per_identity
    }
}

/// Without-replacement epoch sampler honoring a `BatchComposition` exactly.
pub struct IdentityBatchSampler {
    per_identity: BTreeMap<u32, Vec<usize>>,
    comp: BatchComposition,
}

impl IdentityBatchSampler {
    pub fn new(dataset: &Dataset, indices: &[usize], comp: BatchComposition) -> Result<Self> {
        if comp.identities_per_batch == 0 || comp.samples_per_identity == 0 {
            return Err(Error::Config("batch composition counts must be >= 1".into()));
        }
        let per_identity = dataset.by_identity(indices);
        if per_identity.len() < comp.identities_per_batch {
            return Err(Error::Config(format!(
                "{} identities available, batch wants {}",
                per_identity.len(),
                comp.identities_per_batch
            )));
        }
        for (p, idxs) in &per_identity {
            if idxs.len() < comp.samples_per_identity {
                return Err(Error::Config(format!(
                    "identity {p} has only {} examples, need at least {}",
                    idxs.len(),
                    comp.samples_per_identity
                )));
            }
        }
        Ok(IdentityBatchSampler { per_identity, comp })
    }

    /// Deterministic batches for one epoch. Every example appears at most
    /// once; each batch holds exactly `identities_per_batch` distinct
    /// identities with `samples_per_identity` examples each.
    pub fn epoch(&self, epoch_index: u64) -> Vec<Vec<usize>> {
        let spi = self.comp.samples_per_identity;
        let mut groups: BTreeMap<u32, Vec<Vec<usize>>> = BTreeMap::new();
        for (&p, idxs) in &self.per_identity {
            let mut shuffled = idxs.clone();
            let mut rng = seeded(derive(self.comp.seed, (epoch_index << 20) ^ p as u64));
            for i in (1..shuffled.len()).rev() {
                let j = rand::Rng::gen_range(&mut rng, 0..=i);
                shuffled.swap(i, j);
            }
            let chunks: Vec<Vec<usize>> = shuffled
                .chunks_exact(spi)
                .map(|c| c.to_vec())
                .collect();
            groups.insert(p, chunks);
        }
        let mut batches = Vec::new();
        loop {
            // identities with the most remaining groups first; id breaks ties
            let mut ranked: Vec<(usize, u32)> = groups
                .iter()
                .filter(|(_, g)| !g.is_empty())
                .map(|(&p, g)| (g.len(), p))
                .collect();
            if ranked.len() < self.comp.identities_per_batch {
                break;
            }
            ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut batch = Vec::with_capacity(self.comp.batch_size());
            for &(_, p) in ranked.iter().take(self.comp.identities_per_batch) {
                let g = groups.get_mut(&p).unwrap().pop().unwrap();
                batch.extend(g);
            }
            batches.push(batch);
        }
        batches
    }
}

/// Load a CIFAR-style binary archive directory. CIFAR-10 uses
/// `data_batch_{1..5}.bin` / `test_batch.bin` with one label byte per
/// record; CIFAR-100 uses `train.bin` / `test.bin` with two label bytes
/// (coarse, fine) — the fine label is used. Identity is the class label
/// (p := t). `subset` keeps a class-stratified prefix.
pub fn image_dataset_loader(
    path: &Path,
    split: &str,
    subset: Option<usize>,
) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Ingestion(format!(
            "dataset directory {} does not exist",
            path.display()
        )));
    }
    let c100_train = path.join("train.bin");
    let is_c100 = c100_train.exists();
    let (label_bytes, num_classes): (usize, u32) = if is_c100 { (2, 100) } else { (1, 10) };
    let files_for = |split: &str| -> Result<Vec<std::path::PathBuf>> {
        Ok(if is_c100 {
            match split {
                "train" => vec![path.join("train.bin")],
                "test" => vec![path.join("test.bin")],
                other => return Err(Error::Config(format!("unknown split {other}"))),
            }
        } else {
            match split {
                "train" => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
                "test" => vec![path.join("test_batch.bin")],
                other => return Err(Error::Config(format!("unknown split {other}"))),
            }
        })
    };
    let read_files = |files: &[std::path::PathBuf]| -> Result<Vec<(u32, Vec<u8>)>> {
        let mut raw = Vec::new();
        for f in files {
            let bytes = std::fs::read(f)
                .map_err(|e| Error::Ingestion(format!("{}: {e}", f.display())))?;
            let record = label_bytes + 3072;
            if bytes.is_empty() || bytes.len() % record != 0 {
                return Err(Error::Ingestion(format!(
                    "{}: size {} is not a whole number of {record}-byte records",
                    f.display(),
                    bytes.len()
                )));
            }
            for rec in bytes.chunks_exact(record) {
                let label = rec[label_bytes - 1] as u32; // fine label for CIFAR-100
                if label >= num_classes {
                    return Err(Error::Ingestion(format!(
                        "{}: label {label} out of range",
                        f.display()
                    )));
                }
                raw.push((label, rec[label_bytes..].to_vec()));
            }
        }
        Ok(raw)
    };
    let mut raw = read_files(&files_for(split)?)?;
    if let Some(n) = subset {
        raw = stratified_prefix(raw, num_classes, n)?;
    }
    // standardization statistics always come from the training split
    let train_raw;
    let stats_src: &[(u32, Vec<u8>)] = if split == "train" {
        &raw
    } else {
        train_raw = read_files(&files_for("train")?)?;
        &train_raw
    };
    let channel_stats: Vec<(f64, f64)> = (0..3)
        .map(|ci| {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for (_, pix) in stats_src {
                for k in 0..1024 {
                    sum += pix[ci * 1024 + k] as f64 / 255.0;
                    n += 1;
                }
            }
            let mean = sum / n as f64;
            let mut var = 0.0f64;
            for (_, pix) in stats_src {
                for k in 0..1024 {
                    let d = pix[ci * 1024 + k] as f64 / 255.0 - mean;
                    var += d * d;
                }
            }
            (mean, (var / n as f64).sqrt().max(1e-8))
        })
        .collect();
    let mut examples = Vec::with_capacity(raw.len());
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (label, pix) in &raw {
        let mut img = Array3::<f32>::zeros((3, 32, 32));
        for ci in 0..3 {
            let (m, s) = channel_stats[ci];
            for hi in 0..32 {
                for wi in 0..32 {
                    let v = pix[ci * 1024 + hi * 32 + wi] as f64 / 255.0;
                    img[[ci, hi, wi]] = ((v - m) / s) as f32;
                }
            }
        }
        let t = label + 1;
        examples.push(Example {
            input: img,
            class_label: t,
            identity: t, // p := t for class-labeled archives
        });
        *counts.entry((t, t)).or_default() += 1;
    }
    let manifest = Manifest {
        counts: counts.into_iter().map(|((c, p), n)| (c, p, n)).collect(),
        identities: Vec::new(),
        standardization: channel_stats,
    };
    Ok(Dataset {
        examples,
        num_classes,
        num_identities: num_classes,
        image_hw: (32, 32),
        manifest,
    })
}

fn stratified_prefix(
    raw: Vec<(u32, Vec<u8>)>,
    num_classes: u32,
    n: usize,
) -> Result<Vec<(u32, Vec<u8>)>> {
    if n == 0 || n % num_classes as usize != 0 {
        return Err(Error::Config(format!(
            "subset size {n} must be a positive multiple of {num_classes} for class stratification"
        )));
    }
    let per_class = n / num_classes as usize;
    let mut taken: BTreeMap<u32, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for (label, pix) in raw {
        let cnt = taken.entry(label).or_default();
        if *cnt < per_class {
            *cnt += 1;
            out.push((label, pix));
        }
    }
    if out.len() != n {
        return Err(Error::Ingestion(format!(
            "archive too small for a stratified subset of {n}"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let a = synth_identity_dataset(4, 8, 10, 0.3, 7).unwrap();
        let b = synth_identity_dataset(4, 8, 10, 0.3, 7).unwrap();
        assert_eq!(a.examples.len(), b.examples.len());
        for (ea, eb) in a.examples.iter().zip(b.examples.iter()) {
            assert_eq!(ea.class_label, eb.class_label);
            assert_eq!(ea.identity, eb.identity);
            assert_eq!(
                ea.input.as_slice().unwrap(),
                eb.input.as_slice().unwrap(),
                "same seed must give byte-identical data"
            );
        }
        let c = synth_identity_dataset(4, 8, 10, 0.3, 8).unwrap();
        assert_ne!(
            a.examples[0].input.as_slice().unwrap(),
            c.examples[0].input.as_slice().unwrap()
        );
    }

    #[test]
    fn identity_class_partition() {
        // t = p mode
        let tp = synth_identity_dataset(4, 4, 3, 0.1, 1).unwrap();
        for ex in &tp.examples {
            assert_eq!(ex.class_label, ex.identity);
        }
        // 8 identities over 4 classes: each class spans 2 identities
        let ds = synth_identity_dataset(4, 8, 3, 0.1, 1).unwrap();
        let mut class_ids: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
        for ex in &ds.examples {
            class_ids.entry(ex.class_label).or_default().insert(ex.identity);
        }
        for (_, ids) in class_ids {
            assert_eq!(ids.len(), 2);
        }
        // invalid divisibility
        assert!(matches!(
            synth_identity_dataset(4, 6, 3, 0.1, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn manifest_counts_and_identity_params_recoverable() {
        let ds = synth_identity_dataset(2, 4, 5, 0.2, 3).unwrap();
        assert_eq!(ds.manifest.counts.len(), 4);
        for &(_, _, n) in &ds.manifest.counts {
            assert_eq!(n, 5);
        }
        assert_eq!(ds.manifest.identities.len(), 4);
        // same-identity examples share transform parameters; regenerating
        // from the manifest seed reproduces the bias field
        let p = &ds.manifest.identities[1];
        let bias1 = identity_bias(p.bias_seed, 16, 16);
        let bias2 = identity_bias(p.bias_seed, 16, 16);
        assert_eq!(bias1, bias2);
        let json = ds.manifest.to_json();
        assert!(json.contains("bias_seed"));
    }

    #[test]
    fn standardization_normalizes_train_split() {
        let ds = synth_identity_dataset(4, 8, 40, 0.3, 5).unwrap();
        let (train, _) = ds.split(0.25);
        for ci in 0..3 {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for &i in &train {
                for v in ds.examples[i].input.index_axis(ndarray::Axis(0), ci).iter() {
                    sum += *v as f64;
                    n += 1;
                }
            }
            let mean = sum / n as f64;
            let mut var = 0.0f64;
            for &i in &train {
                for v in ds.examples[i].input.index_axis(ndarray::Axis(0), ci).iter() {
                    var += (*v as f64 - mean) * (*v as f64 - mean);
                }
            }
            let std = (var / n as f64).sqrt();
            assert!(mean.abs() < 0.01, "channel {ci} mean {mean}");
            assert!((std - 1.0).abs() < 0.02, "channel {ci} std {std}");
        }
    }

    #[test]
    fn split_holds_out_last_quarter_per_identity() {
        let ds = synth_identity_dataset(4, 8, 20, 0.1, 2).unwrap();
        let (train, hold) = ds.split(0.25);
        assert_eq!(train.len(), 8 * 15);
        assert_eq!(hold.len(), 8 * 5);
        let per_id = ds.by_identity(&hold);
        for (_, idxs) in per_id {
            assert_eq!(idxs.len(), 5);
        }
    }

    #[test]
    fn sampler_satisfies_composition_exactly() {
        let ds = synth_identity_dataset(4, 8, 20, 0.1, 4).unwrap();
        let (train, _) = ds.split(0.25);
        let comp = BatchComposition {
            identities_per_batch: 2,
            samples_per_identity: 4,
            seed: 9,
        };
        let sampler = IdentityBatchSampler::new(&ds, &train, comp).unwrap();
        let batches = sampler.epoch(0);
        assert!(!batches.is_empty());
        let mut seen = std::collections::BTreeSet::new();
        let mut id_hist: BTreeMap<u32, usize> = BTreeMap::new();
        for batch in &batches {
            assert_eq!(batch.len(), 8);
            let mut ids: BTreeMap<u32, usize> = BTreeMap::new();
            for &i in batch {
                assert!(seen.insert(i), "example {i} repeated within epoch");
                *ids.entry(ds.examples[i].identity).or_default() += 1;
            }
            assert_eq!(ids.len(), 2, "exactly two distinct identities per batch");
            for (p, n) in ids {
                assert_eq!(n, 4);
                *id_hist.entry(p).or_default() += 1;
            }
        }
        assert!(seen.len() <= train.len());
        // balance: 15 train examples per identity -> 3 groups of 4 each
        let counts: Vec<usize> = id_hist.values().cloned().collect();
        let min = counts.iter().min().unwrap();
        let max = counts.iter().max().unwrap();
        assert!(max - min <= 1, "identity batch histogram out of balance: {id_hist:?}");
    }

    #[test]
    fn sampler_rejects_small_identities() {
        let ds = synth_identity_dataset(4, 8, 4, 0.1, 4).unwrap();
        let (train, _) = ds.split(0.25);
        let comp = BatchComposition {
            identities_per_batch: 2,
            samples_per_identity: 16,
            seed: 9,
        };
        assert!(matches!(
            IdentityBatchSampler::new(&ds, &train, comp),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sampler_epochs_differ_but_are_reproducible() {
        let ds = synth_identity_dataset(4, 4, 16, 0.1, 4).unwrap();
        let (train, _) = ds.split(0.25);
        let comp = BatchComposition {
            identities_per_batch: 2,
            samples_per_identity: 3,
            seed: 11,
        };
        let sampler = IdentityBatchSampler::new(&ds, &train, comp).unwrap();
        assert_eq!(sampler.epoch(0), sampler.epoch(0));
        assert_ne!(sampler.epoch(0), sampler.epoch(1));
    }

    fn write_fake_cifar10(dir: &Path, per_file: usize) {
        for fi in 1..=5 {
            let mut bytes = Vec::new();
            for r in 0..per_file {
                bytes.push(((r + fi) % 10) as u8);
                let base = (r * 37 + fi * 11) as u32;
                for k in 0..3072u32 {
                    bytes.push(((base + k) % 251) as u8);
                }
            }
            std::fs::write(dir.join(format!("data_batch_{fi}.bin")), &bytes).unwrap();
        }
        let mut bytes = Vec::new();
        for r in 0..per_file {
            bytes.push((r % 10) as u8);
            bytes.extend(std::iter::repeat(7u8).take(3072));
        }
        std::fs::write(dir.join("test_batch.bin"), &bytes).unwrap();
    }

    #[test]
    fn cifar10_layout_loads_with_p_equal_t() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar10(dir.path(), 30);
        let ds = image_dataset_loader(dir.path(), "train", None).unwrap();
        assert_eq!(ds.examples.len(), 150);
        assert_eq!(ds.num_classes, 10);
        for ex in &ds.examples {
            assert_eq!(ex.class_label, ex.identity);
        }
        let test = image_dataset_loader(dir.path(), "test", None).unwrap();
        assert_eq!(test.examples.len(), 30);
    }

    #[test]
    fn cifar100_layout_uses_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for r in 0..20 {
            bytes.push((r % 20) as u8); // coarse
            bytes.push((r % 100) as u8); // fine
            bytes.extend(std::iter::repeat(3u8).take(3072));
        }
        std::fs::write(dir.path().join("train.bin"), &bytes).unwrap();
        std::fs::write(dir.path().join("test.bin"), &bytes).unwrap();
        let ds = image_dataset_loader(dir.path(), "train", None).unwrap();
        assert_eq!(ds.num_classes, 100);
        assert_eq!(ds.examples[7].class_label, 8);
    }

    #[test]
    fn cifar_subset_is_class_stratified() {
        let dir = tempfile::tempdir().unwrap();
        write_fake_cifar10(dir.path(), 50);
        let ds = image_dataset_loader(dir.path(), "train", Some(100)).unwrap();
        assert_eq!(ds.examples.len(), 100);
        let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
        for ex in &ds.examples {
            *hist.entry(ex.class_label).or_default() += 1;
        }
        for (_, n) in hist {
            assert_eq!(n, 10);
        }
    }

    #[test]
    fn missing_or_corrupt_archives_are_ingestion_errors() {
        let dir = tempfile::tempdir().unwrap();
        match image_dataset_loader(&dir.path().join("absent"), "train", None) {
            Err(Error::Ingestion(msg)) => assert!(msg.contains("absent")),
            other => panic!("expected ingestion error, got {other:?}"),
        }
        // truncated record
        std::fs::write(dir.path().join("data_batch_1.bin"), [1u8, 2, 3]).unwrap();
        for fi in 2..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{fi}.bin")), []).unwrap();
        }
        match image_dataset_loader(dir.path(), "train", None) {
            Err(Error::Ingestion(msg)) => {
                assert!(msg.contains("data_batch_1.bin"), "error carries file context: {msg}")
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }
}
