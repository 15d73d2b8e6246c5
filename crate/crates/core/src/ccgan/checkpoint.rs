//! Checkpoint serialization: a versioned binary container holding both
//! network configs as a key-value text block followed by raw 64-bit
//! little-endian arrays (parameters, normalization state, optimizer
//! moments, loss history) in declared order. Round-tripping a checkpoint
//! reproduces forward outputs bitwise — floats are stored as raw bits,
//! never formatted.

use super::nets::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use super::opt::Adam;
use super::tensor::Tensor;
use super::train::{Checkpoint, TrainingConfig};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PGCK";
const VERSION: u32 = 1;

// -- little-endian writer helpers -------------------------------------------

pub(crate) fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f64_slice(buf: &mut Vec<u8>, vals: &[f64]) {
    push_u64(buf, vals.len() as u64);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn push_tensors<'a>(buf: &mut Vec<u8>, tensors: impl IntoIterator<Item = &'a Tensor>) {
    for t in tensors {
        push_f64_slice(buf, t.values());
    }
}

// -- reader ------------------------------------------------------------------

pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptFile(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f64_vec(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u64(what)? as usize;
        let b = self.take(n * 8, what)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Read one array into an existing tensor, enforcing its length.
    pub(crate) fn fill_tensor(&mut self, t: &mut Tensor, what: &str) -> Result<()> {
        let vals = self.f64_vec(what)?;
        if vals.len() != t.len() {
            return Err(Error::CorruptFile(format!(
                "{what}: expected {} values, file has {}",
                t.len(),
                vals.len()
            )));
        }
        t.values_mut().copy_from_slice(&vals);
        Ok(())
    }

    pub(crate) fn fill_vec(&mut self, v: &mut Vec<f64>, what: &str) -> Result<()> {
        let vals = self.f64_vec(what)?;
        if vals.len() != v.len() {
            return Err(Error::CorruptFile(format!(
                "{what}: expected {} values, file has {}",
                v.len(),
                vals.len()
            )));
        }
        v.copy_from_slice(&vals);
        Ok(())
    }
}

// -- key-value header ---------------------------------------------------------

pub(crate) struct Header(pub(crate) BTreeMap<String, String>);

impl Header {
    pub(crate) fn parse(text: &str) -> Self {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        Header(map)
    }

    pub(crate) fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.0
            .get(key)
            .ok_or_else(|| Error::CorruptFile(format!("missing header key {key}")))?
            .parse()
            .map_err(|_| Error::CorruptFile(format!("unparseable header key {key}")))
    }
}

/// Floats in the text header are stored as raw bits (hex), so the header
/// never loses precision to decimal formatting.
fn fmt_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_f64(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::CorruptFile(format!("bad float bits {s}")))
}

fn header_text(ck: &Checkpoint) -> String {
    let g = &ck.generator.cfg;
    let d = &ck.discriminator.cfg;
    let t = &ck.train_cfg;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("gen.latent_dim", g.latent_dim.to_string());
    kv("gen.embed_dim", g.embed_dim.to_string());
    kv("gen.n_classes", g.n_classes.to_string());
    kv("gen.base_channels", g.base_channels.to_string());
    kv("gen.resolution", g.resolution.to_string());
    kv("gen.use_nonlocal", (g.use_nonlocal as u8).to_string());
    kv("disc.resolution", d.resolution.to_string());
    kv("disc.channels", d.channels.to_string());
    kv("disc.use_nonlocal", (d.use_nonlocal as u8).to_string());
    kv("disc.n_classes", d.n_classes.to_string());
    kv("train.batch_size", t.batch_size.to_string());
    kv("train.lr", fmt_f64(t.lr));
    kv("train.beta1", fmt_f64(t.beta1));
    kv("train.beta2", fmt_f64(t.beta2));
    kv("train.g_steps_per_d", t.g_steps_per_d.to_string());
    kv("train.lr_decay", fmt_f64(t.lr_decay));
    kv("train.max_iters", t.max_iters.to_string());
    kv("train.collapse_window", t.collapse_window.to_string());
    kv("train.seed", t.seed.to_string());
    kv("iteration", ck.iteration.to_string());
    kv("adam_g.t", ck.adam_g.t.to_string());
    kv("adam_d.t", ck.adam_d.t.to_string());
    kv("d_loss.len", ck.d_loss.len().to_string());
    kv("g_loss.len", ck.g_loss.len().to_string());
    kv("rng_stream", ck.rng_stream.to_string());
    kv("rng_word_pos", ck.rng_word_pos.to_string());
    s
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let header = header_text(self);
        push_u64(&mut buf, header.len() as u64);
        buf.extend_from_slice(header.as_bytes());
        buf.extend_from_slice(&self.rng_seed);

        push_tensors(&mut buf, self.generator.params());
        for sn in self.generator.sn_states() {
            push_f64_slice(&mut buf, &sn.u);
            push_f64_slice(&mut buf, &sn.v);
        }
        push_tensors(&mut buf, self.generator.bn_stats());
        push_tensors(&mut buf, self.discriminator.params());
        push_tensors(&mut buf, &self.adam_g.m);
        push_tensors(&mut buf, &self.adam_g.v);
        push_tensors(&mut buf, &self.adam_d.m);
        push_tensors(&mut buf, &self.adam_d.v);
        push_f64_slice(&mut buf, &self.d_loss);
        push_f64_slice(&mut buf, &self.g_loss);

        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let data = std::fs::read(path)?;
        let mut r = Reader { buf: &data, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::UnsupportedFormat("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let hlen = r.u64("header length")? as usize;
        let htext = std::str::from_utf8(r.take(hlen, "header")?)
            .map_err(|_| Error::CorruptFile("header is not utf-8".into()))?;
        let h = Header::parse(htext);

        let gcfg = GeneratorConfig {
            latent_dim: h.get("gen.latent_dim")?,
            embed_dim: h.get("gen.embed_dim")?,
            n_classes: h.get("gen.n_classes")?,
            base_channels: h.get("gen.base_channels")?,
            resolution: h.get("gen.resolution")?,
            use_nonlocal: h.get::<u8>("gen.use_nonlocal")? != 0,
        };
        let dcfg = DiscriminatorConfig {
            resolution: h.get("disc.resolution")?,
            channels: h.get("disc.channels")?,
            use_nonlocal: h.get::<u8>("disc.use_nonlocal")? != 0,
            n_classes: h.get("disc.n_classes")?,
        };
        let tcfg = TrainingConfig {
            batch_size: h.get("train.batch_size")?,
            lr: parse_f64(&h.get::<String>("train.lr")?)?,
            beta1: parse_f64(&h.get::<String>("train.beta1")?)?,
            beta2: parse_f64(&h.get::<String>("train.beta2")?)?,
            g_steps_per_d: h.get("train.g_steps_per_d")?,
            lr_decay: parse_f64(&h.get::<String>("train.lr_decay")?)?,
            max_iters: h.get("train.max_iters")?,
            collapse_window: h.get("train.collapse_window")?,
            seed: h.get("train.seed")?,
        };

        // shell networks with the right shapes; every tensor is overwritten
        let mut shell_rng = ChaCha8Rng::seed_from_u64(0);
        let mut generator = Generator::new(&gcfg, &mut shell_rng)?;
        let mut discriminator = Discriminator::new(&dcfg, &mut shell_rng)?;
        let mut adam_g = Adam::new(&generator.params(), tcfg.beta1, tcfg.beta2);
        let mut adam_d = Adam::new(&discriminator.params(), tcfg.beta1, tcfg.beta2);
        adam_g.t = h.get("adam_g.t")?;
        adam_d.t = h.get("adam_d.t")?;

        let rng_seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();

        for (i, p) in generator.params_mut().into_iter().enumerate() {
            r.fill_tensor(p, &format!("generator parameter {i}"))?;
        }
        for (i, sn) in generator.sn_states_mut().into_iter().enumerate() {
            r.fill_vec(&mut sn.u, &format!("spectral state u {i}"))?;
            r.fill_vec(&mut sn.v, &format!("spectral state v {i}"))?;
        }
        for (i, t) in generator.bn_stats_mut().into_iter().enumerate() {
            r.fill_tensor(t, &format!("batch-norm statistic {i}"))?;
        }
        for (i, p) in discriminator.params_mut().into_iter().enumerate() {
            r.fill_tensor(p, &format!("discriminator parameter {i}"))?;
        }
        for (i, t) in adam_g.m.iter_mut().enumerate() {
            r.fill_tensor(t, &format!("generator moment m {i}"))?;
        }
        for (i, t) in adam_g.v.iter_mut().enumerate() {
            r.fill_tensor(t, &format!("generator moment v {i}"))?;
        }
        for (i, t) in adam_d.m.iter_mut().enumerate() {
            r.fill_tensor(t, &format!("discriminator moment m {i}"))?;
        }
        for (i, t) in adam_d.v.iter_mut().enumerate() {
            r.fill_tensor(t, &format!("discriminator moment v {i}"))?;
        }
        let mut d_loss = vec![0.0; h.get::<usize>("d_loss.len")?];
        r.fill_vec(&mut d_loss, "discriminator loss history")?;
        let mut g_loss = vec![0.0; h.get::<usize>("g_loss.len")?];
        r.fill_vec(&mut g_loss, "generator loss history")?;

        Ok(Checkpoint {
            generator,
            discriminator,
            adam_g,
            adam_d,
            iteration: h.get("iteration")?,
            d_loss,
            g_loss,
            train_cfg: tcfg,
            rng_seed,
            rng_stream: h.get("rng_stream")?,
            rng_word_pos: h.get("rng_word_pos")?,
        })
    }

    /// Rebuild the training RNG exactly where the snapshot left it.
    pub fn resume_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::super::train::{gan_train, TrainingConfig};
    use super::*;
    use crate::grid::Grid;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn trained_checkpoint() -> Checkpoint {
        let mut data = Vec::new();
        for i in 0..8 {
            let v = if i % 2 == 0 { 0.5 } else { -0.5 };
            data.push((Grid::from_fn(8, 8, |_, _| v), i % 2));
        }
        let gcfg = GeneratorConfig {
            latent_dim: 6,
            embed_dim: 4,
            n_classes: 2,
            base_channels: 8,
            resolution: 8,
            use_nonlocal: true,
        };
        let dcfg =
            DiscriminatorConfig { resolution: 8, channels: 8, use_nonlocal: true, n_classes: 2 };
        let mut tcfg = TrainingConfig::desk(6, 21);
        tcfg.batch_size = 8;
        let out = gan_train(&data, &gcfg, &dcfg, &tcfg).unwrap();
        out.checkpoints.last().unwrap().clone()
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let ck = trained_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);

        // and the forward pass agrees bitwise
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut z = Tensor::zeros(&[3, 6]);
        for v in z.values_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let ids = vec![0usize, 1, 0];
        let (a, _) = ck.generator().infer(&z, &ids);
        let (b, _) = back.generator().infer(&z, &ids);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn resume_rng_restores_stream_position() {
        let ck = trained_checkpoint();
        let mut a = ck.resume_rng();
        let mut b = ck.resume_rng();
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ck");
        std::fs::write(&path, b"NOPE0000rest").unwrap();
        match Checkpoint::load(&path) {
            Err(Error::UnsupportedFormat(_)) => {}
            other => panic!("expected format rejection, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ck = trained_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        match Checkpoint::load(&cut) {
            Err(Error::CorruptFile(_)) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }
    }
}
