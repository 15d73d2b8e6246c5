//! A small convolutional grid classifier. It stands in for the heavyweight
//! victim recognizers during desk-scale experiments: the perturbation oracle
//! differentiates through it, and defended/undefended accuracy against it
//! quantifies the purification effect.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ccgan::checkpoint::{push_tensors, push_u64, Header, Reader};
use crate::ccgan::layers::{
    avg_pool2, avg_pool2_backward, relu, relu_backward, Conv2d, ConvCache, Linear, LinearCache,
};
use crate::ccgan::{orthogonal_init_tensor, replicate_channels, Adam, Tensor};
use crate::error::{Error, Result};
use crate::grid::Grid;

const MAGIC: &[u8; 4] = b"PGPB";
const VERSION: u32 = 1;
const HIDDEN_CHANNELS: usize = 8;

/// Two stride-2-pooled conv stages flattened into a linear head. The
/// flatten (rather than a global pool) keeps spatial position visible, which
/// matters because spectrogram classes differ by where their energy sits,
/// not just by texture. Inference is a pure function of the parameters: no
/// normalization layers, no randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClassifier {
    pub n_classes: usize,
    pub resolution: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    lin: Linear,
}

pub struct ProbeTrace {
    c1: ConvCache,
    r1: Tensor,
    c2: ConvCache,
    r2: Tensor,
    pre_pool_shape: Vec<usize>,
    lc: LinearCache,
}

impl ProbeClassifier {
    pub fn new<R: Rng>(n_classes: usize, resolution: usize, rng: &mut R) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::BadConfig(format!("probe needs >= 2 classes, got {n_classes}")));
        }
        if resolution < 8 || !resolution.is_power_of_two() {
            return Err(Error::BadConfig(format!(
                "probe resolution {resolution} must be a power of two >= 8"
            )));
        }
        let mut conv1 = Conv2d::new(HIDDEN_CHANNELS, 3, 3, 1);
        let mut conv2 = Conv2d::new(HIDDEN_CHANNELS, HIDDEN_CHANNELS, 3, 1);
        let feat = HIDDEN_CHANNELS * (resolution / 4) * (resolution / 4);
        let mut lin = Linear::new(n_classes, feat);
        conv1.w = orthogonal_init_tensor(conv1.w.shape(), 1.0, rng);
        conv2.w = orthogonal_init_tensor(conv2.w.shape(), 1.0, rng);
        lin.w = orthogonal_init_tensor(lin.w.shape(), 1.0, rng);
        Ok(ProbeClassifier { n_classes, resolution, conv1, conv2, lin })
    }

    /// Logits for a batch of replicated grids, shape [n, 3, S, S] -> [n, k].
    pub fn forward(&self, x: &Tensor) -> (Tensor, ProbeTrace) {
        assert_eq!(x.shape()[1], 3, "probe expects replicated 3-channel input");
        assert_eq!(x.shape()[2], self.resolution, "probe input resolution");
        let (h, c1) = self.conv1.forward(x);
        let (h, r1) = relu(&h);
        let h = avg_pool2(&h);
        let (h, c2) = self.conv2.forward(&h);
        let (h, r2) = relu(&h);
        let h = avg_pool2(&h);
        let pre_pool_shape = h.shape().to_vec();
        let n = pre_pool_shape[0];
        let feat = h.len() / n;
        let flat = h.reshaped(&[n, feat]).expect("flatten preserves volume");
        let (logits, lc) = self.lin.forward(&flat);
        (logits, ProbeTrace { c1, r1, c2, r2, pre_pool_shape, lc })
    }

    /// Gradients of the logits pullback: input gradient [n, 3, S, S] plus
    /// parameter gradients in [`Self::params`] order.
    pub fn backward(&self, t: &ProbeTrace, g_logits: &Tensor) -> (Tensor, Vec<Tensor>) {
        let (gp, gw_lin, gb_lin) = self.lin.backward(&t.lc, g_logits);
        let gh = gp.reshaped(&t.pre_pool_shape).expect("unflatten preserves volume");
        let gh = avg_pool2_backward(&gh);
        let gh = relu_backward(&t.r2, &gh);
        let (gh, gw2, gb2) = self.conv2.backward(&t.c2, &gh);
        let gh = avg_pool2_backward(&gh);
        let gh = relu_backward(&t.r1, &gh);
        let (gx, gw1, gb1) = self.conv1.backward(&t.c1, &gh);
        (gx, vec![gw1, gb1, gw2, gb2, gw_lin, gb_lin])
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.conv1.w, &self.conv1.b, &self.conv2.w, &self.conv2.b, &self.lin.w, &self.lin.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.lin.w,
            &mut self.lin.b,
        ]
    }

    /// Predicted class of one normalized grid (ties go to the lower id).
    pub fn predict(&self, grid: &Grid) -> Result<usize> {
        let x = grid_batch(&[grid], self.resolution)?;
        let (logits, _) = self.forward(&x);
        Ok(argmax(logits.values()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let header = format!(
            "n_classes={}\nresolution={}\n",
            self.n_classes, self.resolution
        );
        push_u64(&mut buf, header.len() as u64);
        buf.extend_from_slice(header.as_bytes());
        push_tensors(&mut buf, self.params());
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        let mut r = Reader { buf: &buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::UnsupportedFormat(format!(
                "{}: not a probe classifier file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("probe file version {version}")));
        }
        let hlen = r.u64("header length")? as usize;
        let header = std::str::from_utf8(r.take(hlen, "header")?)
            .map_err(|_| Error::CorruptFile("probe header is not UTF-8".into()))?;
        let header = Header::parse(header);
        let n_classes: usize = header.get("n_classes")?;
        let resolution: usize = header.get("resolution")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut probe = ProbeClassifier::new(n_classes, resolution, &mut rng)
            .map_err(|e| Error::CorruptFile(format!("probe header: {e}")))?;
        for p in probe.params_mut() {
            r.fill_tensor(p, "probe parameter")?;
        }
        if r.pos != buf.len() {
            return Err(Error::CorruptFile("trailing bytes after probe parameters".into()));
        }
        Ok(probe)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Stack normalized grids into a replicated 3-channel batch tensor.
pub fn grid_batch(grids: &[&Grid], resolution: usize) -> Result<Tensor> {
    let n = grids.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut data = Vec::with_capacity(n * resolution * resolution);
    for g in grids {
        if g.rows() != resolution || g.cols() != resolution {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{} vs probe resolution {resolution}",
                g.rows(),
                g.cols()
            )));
        }
        data.extend_from_slice(g.data());
    }
    let mono = Tensor::from_vec(&[n, 1, resolution, resolution], data)?;
    Ok(replicate_channels(&mono))
}

/// Numerically stable softmax + cross-entropy over one batch of logits.
/// Returns (mean loss, gradient of the mean loss wrt the logits).
pub(crate) fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    assert_eq!(n, labels.len(), "logit rows vs labels");
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for r in 0..n {
        let row = &logits.values()[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[labels[r]];
        let grow = &mut grad.values_mut()[r * k..(r + 1) * k];
        for (j, g) in grow.iter_mut().enumerate() {
            *g = (exps[j] / z - ((j == labels[r]) as usize as f64)) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Train/held-out accuracy of a finished probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

fn accuracy(probe: &ProbeClassifier, data: &[(Grid, usize)], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut hits = 0;
    for &i in idx {
        if probe.predict(&data[i].0)? == data[i].1 {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / idx.len() as f64)
}

/// Train the probe with Adam on cross-entropy. The held-out set is a
/// deterministic stratified 20% split (at least one item per class when a
/// class has two or more); single-item classes stay in training.
pub fn train_probe(
    data: &[(Grid, usize)],
    n_classes: usize,
    epochs: usize,
    seed: u64,
) -> Result<(ProbeClassifier, ProbeReport)> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if n_classes < 2 {
        return Err(Error::BadConfig(format!("probe needs >= 2 classes, got {n_classes}")));
    }
    if epochs == 0 {
        return Err(Error::BadConfig("epochs must be >= 1".into()));
    }
    let resolution = data[0].0.rows();
    for (g, class_id) in data {
        if g.rows() != resolution || g.cols() != resolution {
            return Err(Error::ShapeMismatch(format!(
                "dataset mixes grid sizes: {}x{} vs {resolution}",
                g.rows(),
                g.cols()
            )));
        }
        if *class_id >= n_classes {
            return Err(Error::BadConfig(format!(
                "label {class_id} outside {n_classes} classes"
            )));
        }
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, (_, class_id)) in data.iter().enumerate() {
        by_class[*class_id].push(i);
    }
    if let Some(empty) = by_class.iter().position(|v| v.is_empty()) {
        return Err(Error::EmptyClass(empty));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut held_idx = Vec::new();
    for class in by_class.iter_mut() {
        shuffle(class, &mut rng);
        let held = if class.len() >= 2 { (class.len() / 5).max(1) } else { 0 };
        held_idx.extend_from_slice(&class[..held]);
        train_idx.extend_from_slice(&class[held..]);
    }
    train_idx.sort_unstable();
    held_idx.sort_unstable();

    let mut probe = ProbeClassifier::new(n_classes, resolution, &mut rng)?;
    let mut adam = Adam::new(&probe.params(), 0.9, 0.999);
    let batch = train_idx.len().min(32);
    let mut order = train_idx.clone();
    for _ in 0..epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(batch) {
            let grids: Vec<&Grid> = chunk.iter().map(|&i| &data[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            let x = grid_batch(&grids, resolution)?;
            let (logits, trace) = probe.forward(&x);
            let (_, glogits) = cross_entropy(&logits, &labels);
            let (_, grads) = probe.backward(&trace, &glogits);
            adam.step(&mut probe.params_mut(), &grads, 1e-2);
        }
    }
    let report = ProbeReport {
        train_accuracy: accuracy(&probe, data, &train_idx)?,
        heldout_accuracy: accuracy(&probe, data, &held_idx)?,
    };
    Ok((probe, report))
}

/// Fisher-Yates with the crate's seeded generator.
fn shuffle<R: Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
