use std::path::Path;
use std::sync::Arc;

use pflow_tensor::{Container, EntryData, InterpTap, Padding, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::audio::{FeatureConfig, Frontend, Waveform};
use crate::error::{invalid, Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub blocks: usize,
    /// Dilations run `1, 2, 4, …` and restart every `dilation_cycle` blocks.
    pub dilation_cycle: usize,
    pub kernel: usize,
    pub t_embed_dim: usize,
    pub t_hidden: usize,
    pub cond: CondConfig,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            blocks: 8,
            dilation_cycle: 4,
            kernel: 3,
            t_embed_dim: 32,
            t_hidden: 64,
            cond: CondConfig::default(),
            init_seed: 0,
        }
    }
}

/// Mel spectrogram conditioner settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondConfig {
    pub features: FeatureConfig,
    /// Energy floor inside the log.
    pub floor: f64,
}

impl Default for CondConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig {
                n_mels: 32,
                ..FeatureConfig::default()
            },
            floor: 1e-4,
        }
    }
}

/// Log-mel frames of the input plus the taps that align them with samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioner {
    pub mels: usize,
    pub frames: usize,
    /// `[mels × frames]`.
    pub data: Vec<f32>,
    taps: Vec<(usize, usize, f64)>,
}

impl Conditioner {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Frame-rate values linearly interpolated to one column per sample.
    pub fn upsampled(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.mels * self.taps.len());
        for m in 0..self.mels {
            let row = &self.data[m * self.frames..(m + 1) * self.frames];
            out.extend(
                self.taps
                    .iter()
                    .map(|&(lo, hi, f)| ((1.0 - f) * row[lo] as f64 + f * row[hi] as f64) as f32),
            );
        }
        out
    }

    fn taps<T: Real>(&self) -> Arc<[InterpTap<T>]> {
        self.taps
            .iter()
            .map(|&(lo, hi, f)| InterpTap { lo, hi, frac: T::lit(f) })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DenoiserMeta {
    sample_rate: u32,
    denoiser: DenoiserConfig,
    schedule: ScheduleConfig,
}

/// DiffWave-style ε-predictor: dilated gated residual blocks with additive
/// timestep and conditioner terms, summed skips, one output per sample.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub sample_rate: u32,
    pub schedule: ScheduleConfig,
    cond_frontend: Frontend,
    pub params: ParamStore,
}

const PER_BLOCK: usize = 12;

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig, schedule: &ScheduleConfig, sample_rate: u32) -> Result<Self> {
        if cfg.channels == 0 || cfg.blocks == 0 || cfg.dilation_cycle == 0 || cfg.kernel % 2 == 0 {
            return Err(invalid("denoiser needs channels, blocks, a dilation cycle, and an odd kernel"));
        }
        if cfg.t_embed_dim < 4 || cfg.t_embed_dim % 2 == 1 || cfg.t_hidden == 0 {
            return Err(invalid("timestep embedding must be even and at least 4 wide"));
        }
        schedule.build()?;
        let cond_frontend = Frontend::new(&cfg.cond.features, sample_rate)?;
        let (c, h, m) = (cfg.channels, cfg.t_hidden, cfg.cond.features.n_mels);
        let mut rng = seed::rng(cfg.init_seed, &[0xD1F]);
        let mut normal = |shape: &[usize], fan_in: usize| {
            let n: usize = shape.iter().product();
            let std = (1.0 / fan_in as f64).sqrt();
            Tensor::new(shape, (0..n).map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32).collect())
                .expect("shape matches")
        };
        let mut p = ParamStore::new();
        p.push("in.w", normal(&[c, 1, 1], 1));
        p.push("in.b", Tensor::zeros(&[c, 1]));
        p.push("t.w1", normal(&[cfg.t_embed_dim, h], cfg.t_embed_dim));
        p.push("t.b1", Tensor::zeros(&[1, h]));
        p.push("t.w2", normal(&[h, h], h));
        p.push("t.b2", Tensor::zeros(&[1, h]));
        for i in 0..cfg.blocks {
            p.push(format!("b{i}.t.w"), normal(&[h, c], h));
            p.push(format!("b{i}.t.b"), Tensor::zeros(&[1, c]));
            p.push(format!("b{i}.f.w"), normal(&[c, c, cfg.kernel], c * cfg.kernel));
            p.push(format!("b{i}.f.b"), Tensor::zeros(&[c, 1]));
            p.push(format!("b{i}.g.w"), normal(&[c, c, cfg.kernel], c * cfg.kernel));
            p.push(format!("b{i}.g.b"), Tensor::zeros(&[c, 1]));
            p.push(format!("b{i}.cf.w"), normal(&[c, m, 1], m));
            p.push(format!("b{i}.cg.w"), normal(&[c, m, 1], m));
            p.push(format!("b{i}.res.w"), normal(&[c, c, 1], c));
            p.push(format!("b{i}.res.b"), Tensor::zeros(&[c, 1]));
            p.push(format!("b{i}.skip.w"), normal(&[c, c, 1], c));
            p.push(format!("b{i}.skip.b"), Tensor::zeros(&[c, 1]));
        }
        p.push("out1.w", normal(&[c, c, 1], c));
        p.push("out1.b", Tensor::zeros(&[c, 1]));
        p.push("out2.w", Tensor::zeros(&[1, c, 1]));
        p.push("out2.b", Tensor::zeros(&[1, 1]));
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            schedule: *schedule,
            cond_frontend,
            params: p,
        })
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        self.schedule.build().expect("validated at construction")
    }

    pub fn min_samples(&self) -> usize {
        self.cond_frontend.win
    }

    /// Conditioner from the log-mel spectrogram of `x`.
    pub fn conditioner(&self, x: &[f32]) -> Result<Conditioner> {
        let fe = &self.cond_frontend;
        let energies = fe.mel_energies(x)?;
        let m = fe.n_mels();
        let frames = energies.len() / m;
        let floor = self.cfg.cond.floor;
        let mut data = vec![0.0f32; m * frames];
        for f in 0..frames {
            for k in 0..m {
                data[k * frames + f] = ((energies[f * m + k] + floor).ln() / 10.0) as f32;
            }
        }
        let half = fe.win as f64 / 2.0;
        let taps = (0..x.len())
            .map(|n| {
                let p = ((n as f64 + 0.5 - half) / fe.hop as f64).clamp(0.0, (frames - 1) as f64);
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(frames - 1);
                (lo, hi, p - lo as f64)
            })
            .collect();
        Ok(Conditioner {
            mels: m,
            frames,
            data,
            taps,
        })
    }

    fn time_embedding<T: Real>(&self, t: usize) -> Tensor<T> {
        let half = self.cfg.t_embed_dim / 2;
        let mut v = Vec::with_capacity(2 * half);
        let freq = |i: usize| 10f64.powf(4.0 * i as f64 / (half - 1).max(1) as f64);
        v.extend((0..half).map(|i| T::lit((t as f64 * freq(i) / 1e3).sin())));
        v.extend((0..half).map(|i| T::lit((t as f64 * freq(i) / 1e3).cos())));
        Tensor::new(&[1, 2 * half], v).expect("shape matches")
    }

    /// `ε_θ(x_t, t, cond)` for a 1-D `x_t`; returns a var of the same shape.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x_t: Var,
        t: usize,
        cond: &Conditioner,
    ) -> Result<Var> {
        let len = tape.shape(x_t)[0];
        if cond.len() != len {
            return Err(Error::LengthMismatch(cond.len(), len));
        }
        let c = self.cfg.channels;
        let x = tape.reshape(x_t, &[1, len])?;
        let h = tape.conv1d(x, vars[0], 1, Padding::Same)?;
        let h = tape.add(h, vars[1])?;
        let mut h = tape.relu(h);

        let temb = tape.constant(self.time_embedding(t));
        let e = tape.matmul(temb, vars[2])?;
        let e = tape.add(e, vars[3])?;
        let e = tape.swish(e);
        let e = tape.matmul(e, vars[4])?;
        let e = tape.add(e, vars[5])?;
        let temb = tape.swish(e);

        let cond_frames = tape.constant(Tensor::new(&[cond.mels, cond.frames], cond.data.iter().map(|&v| T::lit(v as f64)).collect())?);
        let taps = cond.taps::<T>();
        let mut skip_sum: Option<Var> = None;
        let s2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        for i in 0..self.cfg.blocks {
            let b = &vars[6 + i * PER_BLOCK..6 + (i + 1) * PER_BLOCK];
            let dilation = 1 << (i % self.cfg.dilation_cycle);
            let tp = tape.matmul(temb, b[0])?;
            let tp = tape.add(tp, b[1])?;
            let tp = tape.reshape(tp, &[c, 1])?;
            let d = tape.add(h, tp)?;

            let gate_in = |tape: &mut Tape<T>, w: Var, bias: Var, cw: Var| -> Result<Var> {
                let y = tape.conv1d(d, w, dilation, Padding::Same)?;
                let y = tape.add(y, bias)?;
                let cp = tape.conv1d(cond_frames, cw, 1, Padding::Same)?;
                let cp = tape.interp(cp, taps.clone())?;
                Ok(tape.add(y, cp)?)
            };
            let f = gate_in(tape, b[2], b[3], b[6])?;
            let g = gate_in(tape, b[4], b[5], b[7])?;
            let f = tape.tanh(f);
            let g = tape.sigmoid(g);
            let z = tape.mul(f, g)?;

            let res = tape.conv1d(z, b[8], 1, Padding::Same)?;
            let res = tape.add(res, b[9])?;
            let hr = tape.add(h, res)?;
            h = tape.scale(hr, s2);
            let sk = tape.conv1d(z, b[10], 1, Padding::Same)?;
            let sk = tape.add(sk, b[11])?;
            skip_sum = Some(match skip_sum {
                Some(acc) => tape.add(acc, sk)?,
                None => sk,
            });
        }
        let n = vars.len();
        let s = tape.scale(skip_sum.expect("at least one block"), T::lit(1.0 / (self.cfg.blocks as f64).sqrt()));
        let o = tape.conv1d(s, vars[n - 4], 1, Padding::Same)?;
        let o = tape.add(o, vars[n - 3])?;
        let o = tape.relu(o);
        let o = tape.conv1d(o, vars[n - 2], 1, Padding::Same)?;
        let o = tape.add(o, vars[n - 1])?;
        Ok(tape.reshape(o, &[len])?)
    }

    /// Noise prediction in `f32` with frozen parameters.
    pub fn predict(&self, x_t: &[f32], t: usize, cond: &Conditioner) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.register(&mut tape, false);
        let x = tape.constant(Tensor::from_vec(x_t.to_vec()));
        let e = self.forward(&mut tape, &vars, x, t, cond)?;
        Ok(tape.value(e).data().to_vec())
    }

    pub fn check_input(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate() != self.sample_rate {
            return Err(invalid(format!(
                "denoiser expects {} Hz audio, got {} Hz",
                self.sample_rate,
                w.sample_rate()
            )));
        }
        if w.len() < self.min_samples() {
            return Err(Error::TooShort {
                what: "purification",
                need: self.min_samples(),
                got: w.len(),
            });
        }
        Ok(())
    }

    pub fn write_to(&self, c: &mut Container) -> Result<()> {
        let meta = DenoiserMeta {
            sample_rate: self.sample_rate,
            denoiser: self.cfg.clone(),
            schedule: self.schedule,
        };
        let json = serde_json::to_vec(&meta).map_err(|e| invalid(e.to_string()))?;
        c.insert("denoiser.meta", EntryData::Bytes(json))?;
        self.params.write_to(c, "denoiser.")?;
        Ok(())
    }

    pub fn read_from(c: &Container) -> Result<Self> {
        let meta: DenoiserMeta = serde_json::from_slice(c.bytes("denoiser.meta")?).map_err(|e| Error::Parse {
            what: "denoiser metadata".into(),
            msg: e.to_string(),
        })?;
        let mut d = Self::new(&meta.denoiser, &meta.schedule, meta.sample_rate)?;
        d.params.read_from(c, "denoiser.")?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        self.write_to(&mut c)?;
        Ok(c.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&Container::load(path)?)
    }
}
