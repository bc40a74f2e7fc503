use pflow_tensor::optim::{clip_grad_norm, collect_grads};
use pflow_tensor::{Adam, Optimizer, ParamStore, SgdMomentum, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderConfig};
use super::loss::aam_softmax_loss;
use crate::audio::{FeatureConfig, Split, SpeakerCorpus};
use crate::error::{invalid, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn build(self, lr: f32, momentum: f32) -> Box<dyn Optimizer> {
        match self {
            OptimizerKind::SgdMomentum => Box::new(SgdMomentum::new(lr, momentum)),
            OptimizerKind::Adam => Box::new(Adam::new(lr)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsvTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub momentum: f32,
    /// Multiply the learning rate by `lr_gamma` every `lr_step_epochs`.
    pub lr_step_epochs: usize,
    pub lr_gamma: f32,
    pub scale: f64,
    pub margin: f64,
    pub clip_norm: f32,
    pub encoder: EncoderConfig,
}

impl Default for AsvTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerKind::SgdMomentum,
            lr: 1e-2,
            momentum: 0.9,
            lr_step_epochs: 10,
            lr_gamma: 0.1,
            scale: 32.0,
            margin: 0.2,
            clip_norm: 5.0,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAsv {
    pub encoder: Encoder,
    /// AAM class weights `[speakers × dim]`.
    pub head: ParamStore,
    /// Mean training loss per epoch, preceded by the loss before any update.
    pub losses: Vec<f64>,
}

/// Minibatch training of the encoder under AAM-softmax on the train split.
pub fn train_asv(corpus: &SpeakerCorpus, features: &FeatureConfig, cfg: &AsvTrainConfig) -> Result<TrainedAsv> {
    let train: Vec<_> = corpus.split(Split::Train).collect();
    if corpus.speakers.len() < 2 || train.is_empty() {
        return Err(invalid("ASV training needs two speakers and a nonempty train split"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch_size must be positive"));
    }
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.init_seed = seed::derive(cfg.seed, &[0xE2C]);
    let mut encoder = Encoder::new(&enc_cfg, features, corpus.sample_rate())?;
    let mut head = ParamStore::new();
    let mut rng = seed::rng(cfg.seed, &[0x4EAD]);
    let k = corpus.speakers.len();
    let d = enc_cfg.embedding_dim;
    head.push(
        "aam.w",
        Tensor::new(&[k, d], (0..k * d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())?,
    );

    let n_enc = encoder.params.len();
    let mut opt = cfg.optimizer.build(cfg.lr, cfg.momentum);
    let mut store = merged(&encoder.params, &head);

    let batch_loss = |store: &ParamStore, idx: &[usize], train_grad: bool| -> Result<(f64, Vec<Vec<f32>>)> {
        let mut tape = Tape::<f32>::new();
        let vars = store.register(&mut tape, train_grad);
        let mut embs = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let u = train[i];
            let x = tape.constant(Tensor::from_vec(u.wave.samples().to_vec()));
            let e = encoder.forward(&mut tape, &vars[..n_enc], x)?;
            embs.push(tape.reshape(e, &[1, d])?);
            labels.push(u.speaker_index);
        }
        let emb = tape.concat(&embs, 0)?;
        let loss = aam_softmax_loss(&mut tape, emb, vars[n_enc], &labels, cfg.scale, cfg.margin)?;
        let value = tape.value(loss).data()[0] as f64;
        let grads = if train_grad {
            let g = tape.backward(loss)?;
            collect_grads(store, &vars, &g)
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let all: Vec<usize> = (0..train.len()).collect();
    let initial = mean_loss(&batch_loss, &store, &all, cfg.batch_size)?;
    let mut losses = vec![initial];
    for epoch in 0..cfg.epochs {
        if cfg.lr_step_epochs > 0 && epoch > 0 && epoch % cfg.lr_step_epochs == 0 {
            opt.set_lr(opt.lr() * cfg.lr_gamma);
        }
        let mut order = all.clone();
        order.shuffle(&mut seed::rng(cfg.seed, &[0xE90C, epoch as u64]));
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grads) = batch_loss(&store, batch, true)?;
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip_norm);
            }
            opt.step(&mut store, &grads);
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        losses.push(sum / count as f64);
    }
    for i in 0..n_enc {
        encoder.params.set(i, store.get(i).clone());
    }
    head.set(0, store.get(n_enc).clone());
    Ok(TrainedAsv { encoder, head, losses })
}

fn mean_loss(
    f: &impl Fn(&ParamStore, &[usize], bool) -> Result<(f64, Vec<Vec<f32>>)>,
    store: &ParamStore,
    idx: &[usize],
    batch: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in idx.chunks(batch) {
        sum += f(store, chunk, false)?.0 * chunk.len() as f64;
    }
    Ok(sum / idx.len() as f64)
}

fn merged(a: &ParamStore, b: &ParamStore) -> ParamStore {
    let mut out = a.clone();
    for (i, n) in b.names().iter().enumerate() {
        out.push(n.clone(), b.get(i).clone());
    }
    out
}
