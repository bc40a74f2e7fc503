use std::path::Path;

use pflow_tensor::{Container, Padding, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureConfig, Frontend, Waveform};
use crate::error::{invalid, Error, Result};
use crate::seed;

const POOL_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Anything mapping raw audio to a unit-norm embedding on a tape.
pub trait SpeakerEncoder: Sync {
    fn sample_rate(&self) -> u32;

    fn embedding_dim(&self) -> usize;

    /// Shortest input that still yields two feature frames.
    fn min_samples(&self) -> usize;

    /// Records the embedding of the 1-D signal `wave` and returns a `[dim]` var.
    fn embed_on_tape<T: Real>(&self, tape: &mut Tape<T>, wave: Var) -> Result<Var>;

    fn embed(&self, w: &Waveform) -> Result<Vec<f32>> {
        self.check_input(w)?;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(w.samples().to_vec()));
        let e = self.embed_on_tape(&mut tape, x)?;
        Ok(tape.value(e).data().to_vec())
    }

    fn check_input(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate() != self.sample_rate() {
            return Err(invalid(format!(
                "encoder expects {} Hz audio, got {} Hz",
                self.sample_rate(),
                w.sample_rate()
            )));
        }
        if w.len() < self.min_samples() {
            return Err(Error::TooShort {
                what: "embedding",
                need: self.min_samples(),
                got: w.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
    pub embedding_dim: usize,
    /// `(kernel width, dilation)` per conv block.
    pub blocks: Vec<(usize, usize)>,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            embedding_dim: 64,
            blocks: vec![(5, 1), (3, 2), (3, 3)],
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderMeta {
    sample_rate: u32,
    features: FeatureConfig,
    encoder: EncoderConfig,
}

/// Log-filterbank front end, dilated conv blocks, mean ∥ std pooling,
/// linear projection, length normalization.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub frontend: Frontend,
    pub params: ParamStore,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, features: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        if cfg.channels == 0 || cfg.embedding_dim == 0 || cfg.blocks.is_empty() {
            return Err(invalid("encoder needs channels, an embedding size, and at least one block"));
        }
        if cfg.blocks.iter().any(|&(k, d)| k == 0 || d == 0) {
            return Err(invalid("encoder kernel widths and dilations must be positive"));
        }
        let frontend = Frontend::new(features, sample_rate)?;
        let mut rng = seed::rng(cfg.init_seed, &[0xE1C]);
        let mut normal = |shape: &[usize], std: f64| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32).collect();
            Tensor::new(shape, data).expect("shape matches")
        };
        let mut params = ParamStore::new();
        let mut c_in = frontend.n_mels();
        for (i, &(k, _)) in cfg.blocks.iter().enumerate() {
            let std = (2.0 / (c_in * k) as f64).sqrt();
            params.push(format!("conv{i}.w"), normal(&[cfg.channels, c_in, k], std));
            params.push(format!("conv{i}.b"), Tensor::zeros(&[cfg.channels, 1]));
            c_in = cfg.channels;
        }
        let std = (1.0 / (2 * cfg.channels) as f64).sqrt();
        params.push("proj.w", normal(&[2 * cfg.channels, cfg.embedding_dim], std));
        params.push("proj.b", Tensor::zeros(&[1, cfg.embedding_dim]));
        Ok(Self {
            cfg: cfg.clone(),
            frontend,
            params,
        })
    }

    /// Forward pass with explicit parameter vars (trainable or constant).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], wave: Var) -> Result<Var> {
        let feats = self.frontend.features_on_tape(tape, wave)?;
        let mut h = tape.transpose(feats)?;
        for (i, &(_, dilation)) in self.cfg.blocks.iter().enumerate() {
            let y = tape.conv1d(h, vars[2 * i], dilation, Padding::Same)?;
            let y = tape.add(y, vars[2 * i + 1])?;
            h = tape.relu(y);
        }
        let mean = tape.mean(h, 1)?;
        let centered = tape.sub(h, mean)?;
        let sq = tape.square(centered);
        let var = tape.mean(sq, 1)?;
        let var = tape.add_scalar(var, T::lit(POOL_EPS));
        let std = tape.sqrt(var)?;
        let stats = tape.concat(&[mean, std], 0)?;
        let stats = tape.transpose(stats)?;
        let nb = self.cfg.blocks.len();
        let z = tape.matmul(stats, vars[2 * nb])?;
        let z = tape.add(z, vars[2 * nb + 1])?;
        let z = tape.reshape(z, &[self.cfg.embedding_dim])?;
        l2_normalize(tape, z)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        self.write_to(&mut c)?;
        Ok(c.save(path)?)
    }

    pub fn write_to(&self, c: &mut Container) -> Result<()> {
        let meta = EncoderMeta {
            sample_rate: self.frontend.sample_rate,
            features: self.frontend.cfg.clone(),
            encoder: self.cfg.clone(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| invalid(e.to_string()))?;
        c.insert("encoder.meta", pflow_tensor::EntryData::Bytes(json))?;
        self.params.write_to(c, "encoder.")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&Container::load(path)?)
    }

    pub fn read_from(c: &Container) -> Result<Self> {
        let meta: EncoderMeta = serde_json::from_slice(c.bytes("encoder.meta")?).map_err(|e| Error::Parse {
            what: "encoder metadata".into(),
            msg: e.to_string(),
        })?;
        let mut enc = Self::new(&meta.encoder, &meta.features, meta.sample_rate)?;
        enc.params.read_from(c, "encoder.")?;
        Ok(enc)
    }
}

pub(crate) fn l2_normalize<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let sq = tape.square(z);
    let ss = tape.sum_all(sq);
    let ss = tape.add_scalar(ss, T::lit(NORM_EPS));
    let norm = tape.sqrt(ss)?;
    Ok(tape.div(z, norm)?)
}

impl SpeakerEncoder for Encoder {
    fn sample_rate(&self) -> u32 {
        self.frontend.sample_rate
    }

    fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim
    }

    fn min_samples(&self) -> usize {
        self.frontend.win + self.frontend.hop
    }

    fn embed_on_tape<T: Real>(&self, tape: &mut Tape<T>, wave: Var) -> Result<Var> {
        let vars = self.params.register(tape, false);
        self.forward(tape, &vars, wave)
    }
}

/// Cosine score of two unit vectors, accumulated in `f64`.
pub fn score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    for v in [a, b] {
        let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(invalid(format!("score expects unit vectors, got norm {n}")));
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok(dot.clamp(-1.0, 1.0))
}
