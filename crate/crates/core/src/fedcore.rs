//! Federated learning substrate: datasets and partitioning, a small
//! multilayer perceptron, local SGD and global model updates.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{check_len, Error, Result};
use crate::numcore::{all_finite, RealVector, RngStream};

/// Labeled samples stored as one flat row-major feature buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        check_len("Dataset features", labels.len() * dim, features.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("labels", format!("label {bad} >= {classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `n` samples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            features: self.features[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            dim: self.dim,
            classes: self.classes,
        }
    }
}

/// Ten (or `classes`) Gaussian blobs: centers drawn `N(0, separation^2 I)`,
/// samples are centers plus unit Gaussian noise. Labels cycle through the
/// classes so any prefix is close to balanced.
pub fn synthetic_blobs(
    rng: &mut RngStream,
    samples: usize,
    dim: usize,
    classes: usize,
    separation: f64,
) -> Result<Dataset> {
    if dim == 0 || classes == 0 {
        return Err(Error::invalid("synthetic", "dim and classes must be positive"));
    }
    let centers: Vec<f64> = (0..classes * dim).map(|_| separation * rng.standard_normal()).collect();
    let mut features = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        labels.push(c);
        features.extend(centers[c * dim..(c + 1) * dim].iter().map(|m| m + rng.standard_normal()));
    }
    Dataset::new(features, labels, dim, classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Reads an IDX image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let bad = |path: &Path, reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if img.len() < 16 || be_u32(&img, 0) != IDX_IMAGES_MAGIC {
        return Err(bad(images, "missing IDX3 image header (magic 0x00000803)".into()));
    }
    if lab.len() < 8 || be_u32(&lab, 0) != IDX_LABELS_MAGIC {
        return Err(bad(labels, "missing IDX1 label header (magic 0x00000801)".into()));
    }
    let count = be_u32(&img, 4) as usize;
    let dim = be_u32(&img, 8) as usize * be_u32(&img, 12) as usize;
    if img.len() != 16 + count * dim {
        return Err(bad(images, format!("expected {} bytes, found {}", 16 + count * dim, img.len())));
    }
    let label_count = be_u32(&lab, 4) as usize;
    if label_count != count || lab.len() != 8 + count {
        return Err(bad(labels, format!("{label_count} labels for {count} images")));
    }
    let features = img[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let labels = lab[8..].iter().map(|&l| l as usize).collect();
    Dataset::new(features, labels, dim, 10)
}

/// Loads `train-*` or `t10k-*` MNIST files from `dir`.
pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DevicePartition {
    pub device_id: usize,
    /// Indices into the training dataset.
    pub samples: Vec<usize>,
    /// `|D_k| / |D|`.
    pub weight: f64,
}

fn with_weights(groups: Vec<Vec<usize>>, total: usize) -> Vec<DevicePartition> {
    groups
        .into_iter()
        .enumerate()
        .map(|(device_id, samples)| DevicePartition {
            device_id,
            weight: samples.len() as f64 / total as f64,
            samples,
        })
        .collect()
}

/// Label-sorted shard partition: split the sorted dataset into
/// `k_total * shards_per_device` equal contiguous shards and deal
/// `shards_per_device` random shards to each device.
///
/// Each device holds at most `shards_per_device` labels whenever the class
/// sizes are multiples of the shard size.
pub fn partition_noniid(
    data: &Dataset,
    k_total: usize,
    shards_per_device: usize,
    rng: &mut RngStream,
) -> Result<Vec<DevicePartition>> {
    let shards = k_total * shards_per_device;
    if shards == 0 || data.len() % shards != 0 || data.len() < shards {
        return Err(Error::invalid(
            "partition",
            format!(
                "{} samples cannot be split into {k_total} x {shards_per_device} equal shards",
                data.len()
            ),
        ));
    }
    let shard_len = data.len() / shards;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| data.label(i));
    let mut shard_ids: Vec<usize> = (0..shards).collect();
    shard_ids.shuffle(rng);
    let groups = shard_ids
        .chunks(shards_per_device)
        .map(|ids| {
            let mut s: Vec<usize> = ids
                .iter()
                .flat_map(|&sh| order[sh * shard_len..(sh + 1) * shard_len].iter().copied())
                .collect();
            s.sort_unstable();
            s
        })
        .collect();
    Ok(with_weights(groups, data.len()))
}

/// Uniformly shuffled equal split.
pub fn partition_iid(data: &Dataset, k_total: usize, rng: &mut RngStream) -> Result<Vec<DevicePartition>> {
    if k_total == 0 || data.len() % k_total != 0 || data.len() < k_total {
        return Err(Error::invalid(
            "partition",
            format!("{} samples cannot be split evenly over {k_total} devices", data.len()),
        ));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let groups = order
        .chunks(data.len() / k_total)
        .map(|c| {
            let mut s = c.to_vec();
            s.sort_unstable();
            s
        })
        .collect();
    Ok(with_weights(groups, data.len()))
}

pub fn select_devices(rng: &mut RngStream, k_total: usize, k: usize) -> Result<Vec<usize>> {
    if k > k_total {
        return Err(Error::invalid(
            "users_per_round",
            format!("{k} exceeds population {k_total}"),
        ));
    }
    rng.subset(k_total, k)
}

/// A differentiable model over a flat parameter vector.
pub trait Model {
    fn num_params(&self) -> usize;

    /// Mean loss over `batch`; writes the mean gradient into `grad`.
    fn loss_and_grad(&self, theta: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) -> f64;

    fn logits(&self, theta: &[f64], x: &[f64]) -> Vec<f64>;
}

/// Fully connected network with ReLU hidden layers and a softmax
/// cross-entropy head. Parameters are laid out layer by layer as the
/// row-major weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<usize>,
}

impl Mlp {
    pub fn new(layers: Vec<usize>) -> Result<Self> {
        if layers.len() < 2 || layers.contains(&0) {
            return Err(Error::invalid(
                "model_layers",
                "need at least input and output sizes, all positive",
            ));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn param_count(layers: &[usize]) -> usize {
        layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weights and biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(&self, rng: &mut RngStream) -> ModelParams {
        let mut theta = Vec::with_capacity(self.num_params());
        for w in self.layers.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                theta.push(bound * (2.0 * rng.uniform() - 1.0));
            }
        }
        ModelParams { theta }
    }

    /// Pre-activations of every layer for one input.
    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() - 1);
        let mut input = x.to_vec();
        let mut offset = 0;
        for w in self.layers.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &theta[offset..offset + fan_in * fan_out];
            let bias = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let z: Vec<f64> = weights
                .chunks_exact(fan_in)
                .zip(bias)
                .map(|(row, b)| b + row.iter().zip(&input).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            input = z.iter().map(|v| v.max(0.0)).collect();
            zs.push(z);
        }
        zs
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

impl Model for Mlp {
    fn num_params(&self) -> usize {
        Self::param_count(&self.layers)
    }

    fn loss_and_grad(&self, theta: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        // parameter offset of each layer
        let offsets: Vec<usize> = self
            .layers
            .windows(2)
            .scan(0, |acc, w| {
                let o = *acc;
                *acc += w[0] * w[1] + w[1];
                Some(o)
            })
            .collect();
        for &i in batch {
            let x = data.features(i);
            let y = data.label(i);
            let zs = self.forward(theta, x);
            let mut delta = zs.last().unwrap().clone();
            softmax_in_place(&mut delta);
            loss -= delta[y].max(f64::MIN_POSITIVE).ln();
            delta[y] -= 1.0;
            for l in (0..zs.len()).rev() {
                let (fan_in, fan_out) = (self.layers[l], self.layers[l + 1]);
                let off = offsets[l];
                let input: Vec<f64> = if l == 0 {
                    x.to_vec()
                } else {
                    zs[l - 1].iter().map(|v| v.max(0.0)).collect()
                };
                for o in 0..fan_out {
                    let d = delta[o] * scale;
                    if d != 0.0 {
                        let g = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                        g.iter_mut().zip(&input).for_each(|(gi, a)| *gi += d * a);
                    }
                    grad[off + fan_in * fan_out + o] += d;
                }
                if l > 0 {
                    let weights = &theta[off..off + fan_in * fan_out];
                    let mut back = vec![0.0; fan_in];
                    for o in 0..fan_out {
                        if delta[o] != 0.0 {
                            let row = &weights[o * fan_in..(o + 1) * fan_in];
                            back.iter_mut().zip(row).for_each(|(b, w)| *b += delta[o] * w);
                        }
                    }
                    for (b, z) in back.iter_mut().zip(&zs[l - 1]) {
                        if *z <= 0.0 {
                            *b = 0.0;
                        }
                    }
                    delta = back;
                }
            }
        }
        loss * scale
    }

    fn logits(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward(theta, x).pop().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta: RealVector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 100,
            local_epochs: 1,
        }
    }
}

/// Runs `local_epochs` epochs of mini-batch SGD on the device's samples,
/// reshuffling every epoch, and returns `theta_local - theta`.
pub fn local_update<M: Model>(
    model: &M,
    theta: &ModelParams,
    data: &Dataset,
    part: &DevicePartition,
    cfg: &SgdConfig,
    rng: &mut RngStream,
) -> Result<RealVector> {
    cfg.validate()?;
    check_len("local_update", model.num_params(), theta.theta.len())?;
    let mut local = theta.theta.clone();
    let mut grad = vec![0.0; local.len()];
    let mut order = part.samples.clone();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let loss = model.loss_and_grad(&local, data, batch, &mut grad);
            if !loss.is_finite() {
                return Err(Error::NonFinite("local loss"));
            }
            local
                .iter_mut()
                .zip(&grad)
                .for_each(|(p, g)| *p -= cfg.learning_rate * g);
        }
    }
    let delta: RealVector = local.iter().zip(&theta.theta).map(|(a, b)| a - b).collect();
    if !all_finite(&delta) {
        return Err(Error::NonFinite("local update"));
    }
    Ok(delta)
}

/// `theta + delta_hat`.
pub fn apply_aggregate(theta: &ModelParams, delta_hat: &[f64]) -> Result<ModelParams> {
    check_len("apply_aggregate", theta.theta.len(), delta_hat.len())?;
    Ok(ModelParams {
        theta: theta.theta.iter().zip(delta_hat).map(|(a, b)| a + b).collect(),
    })
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Fraction of correctly classified samples.
pub fn evaluate<M: Model>(model: &M, theta: &ModelParams, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let correct = (0..test.len())
        .filter(|&i| argmax(&model.logits(&theta.theta, test.features(i))) == test.label(i))
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean training loss over the whole dataset.
pub fn dataset_loss<M: Model>(model: &M, theta: &ModelParams, data: &Dataset) -> f64 {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; model.num_params()];
    model.loss_and_grad(&theta.theta, data, &all, &mut grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng_stream;
    use std::collections::BTreeSet;

    fn blobs(n: usize, dim: usize) -> Dataset {
        synthetic_blobs(&mut rng_stream(0, "data"), n, dim, 10, 3.0).unwrap()
    }

    #[test]
    fn shard_partition_full_mnist_scale() {
        // balanced classes, 6000 per class, so shards never straddle labels
        let labels: Vec<usize> = (0..60_000).map(|i| i % 10).collect();
        let data = Dataset::new(vec![0.0; 60_000], labels, 1, 10).unwrap();
        let parts = partition_noniid(&data, 100, 2, &mut rng_stream(1, "partition")).unwrap();
        assert_eq!(parts.len(), 100);
        let mut seen = BTreeSet::new();
        for p in &parts {
            assert_eq!(p.samples.len(), 600);
            let labels: BTreeSet<_> = p.samples.iter().map(|&i| data.label(i)).collect();
            assert!(labels.len() <= 2);
            for &i in &p.samples {
                assert!(seen.insert(i), "sample {i} assigned twice");
            }
        }
        assert_eq!(seen.len(), 60_000);
        let total: f64 = parts.iter().map(|p| p.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shard_partition_small_and_errors() {
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let data = Dataset::new(vec![0.0; 20], labels, 1, 2).unwrap();
        let parts = partition_noniid(&data, 2, 2, &mut rng_stream(1, "p")).unwrap();
        assert!(parts.iter().all(|p| p.samples.len() == 10));
        assert!(partition_noniid(&data, 3, 2, &mut rng_stream(1, "p")).is_err());
        assert!(partition_iid(&data, 3, &mut rng_stream(1, "p")).is_err());
        let iid = partition_iid(&data, 4, &mut rng_stream(1, "p")).unwrap();
        assert_eq!(iid.iter().map(|p| p.samples.len()).sum::<usize>(), 20);
    }

    #[test]
    fn device_selection() {
        assert_eq!(select_devices(&mut rng_stream(1, "s"), 5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(select_devices(&mut rng_stream(1, "s"), 5, 6).is_err());
        let a = select_devices(&mut rng_stream(3, "s"), 100, 10).unwrap();
        assert_eq!(a, select_devices(&mut rng_stream(3, "s"), 100, 10).unwrap());
    }

    #[test]
    fn selection_frequencies() {
        let rounds = 10_000;
        let mut rng = rng_stream(12, "select");
        let mut counts = vec![0usize; 100];
        for _ in 0..rounds {
            for k in select_devices(&mut rng, 100, 10).unwrap() {
                counts[k] += 1;
            }
        }
        let p = 0.1;
        let sd = (rounds as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - rounds as f64 * p).abs() < 3.0 * sd + 1.0, "{c}");
        }
    }

    #[test]
    fn zero_learning_rate_gives_zero_update() {
        let data = blobs(40, 4);
        let mlp = Mlp::new(vec![4, 5, 10]).unwrap();
        let theta = mlp.init(&mut rng_stream(1, "init"));
        let part = DevicePartition { device_id: 0, samples: (0..40).collect(), weight: 1.0 };
        let cfg = SgdConfig { learning_rate: 0.0, batch_size: 8, local_epochs: 2 };
        let d = local_update(&mlp, &theta, &data, &part, &cfg, &mut rng_stream(1, "sgd")).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn aggregate_application() {
        let t = ModelParams { theta: vec![1.0, 1.0] };
        assert_eq!(apply_aggregate(&t, &[0.0, 0.0]).unwrap(), t);
        assert_eq!(apply_aggregate(&t, &[0.5, -1.0]).unwrap().theta, vec![1.5, 0.0]);
        assert!(apply_aggregate(&t, &[0.5]).is_err());
    }

    #[test]
    fn evaluation_edge_cases() {
        let data = blobs(100, 3);
        let mlp = Mlp::new(vec![3, 10]).unwrap();
        let zero = ModelParams { theta: vec![0.0; mlp.num_params()] };
        let class0 = data.labels().iter().filter(|&&l| l == 0).count() as f64 / 100.0;
        assert_eq!(evaluate(&mlp, &zero, &data).unwrap(), class0);
        assert!(matches!(evaluate(&mlp, &zero, &data.take(0)), Err(Error::EmptyTestSet)));
    }

    #[test]
    fn oracle_weights_classify_separable_set() {
        // class c sits at +10 on axis c; the identity readout is exact
        let classes = 3;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let c = i % classes;
            let mut x = vec![0.0; classes];
            x[c] = 10.0;
            features.extend(x);
            labels.push(c);
        }
        let data = Dataset::new(features, labels, classes, classes).unwrap();
        let mlp = Mlp::new(vec![classes, classes]).unwrap();
        let mut theta = vec![0.0; mlp.num_params()];
        for c in 0..classes {
            theta[c * classes + c] = 1.0;
        }
        assert_eq!(evaluate(&mlp, &ModelParams { theta }, &data).unwrap(), 1.0);
    }

    #[test]
    fn param_counts() {
        assert_eq!(Mlp::param_count(&[784, 26, 10]), 20_680);
        assert_eq!(Mlp::param_count(&[16, 10]), 170);
        assert_eq!(Mlp::param_count(&[16, 16, 10]), 442);
        assert!(Mlp::new(vec![4]).is_err());
        assert!(Mlp::new(vec![4, 0, 2]).is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Vec::new();
        img.extend(0x803u32.to_be_bytes());
        img.extend(2u32.to_be_bytes());
        img.extend(1u32.to_be_bytes());
        img.extend(2u32.to_be_bytes());
        img.extend([0u8, 255, 51, 102]);
        let mut lab = Vec::new();
        lab.extend(0x801u32.to_be_bytes());
        lab.extend(2u32.to_be_bytes());
        lab.extend([7u8, 3]);
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte"), &lab).unwrap();
        let ds = load_mnist(dir.path(), true).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.features(0), &[0.0, 1.0]);
        assert_eq!(ds.features(1), &[0.2, 0.4]);
        assert_eq!(ds.labels(), &[7, 3]);

        img[3] = 0x01;
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        assert!(matches!(load_mnist(dir.path(), true), Err(Error::Format { .. })));
        assert!(matches!(load_mnist(dir.path(), false), Err(Error::Io { .. })));
    }
}
