//! L1 training with ADAM, a multi-step learning-rate schedule, checkpoints
//! and deterministic resumption.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use mtv_autograd::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::{forward, Mtvnet};
use crate::nn::ParamStore;
use crate::volume::{
    degrade, default_blur_sigma, sample_nested, trilinear_upsample, write_atomic, NestedPatch, Volume,
};

const ADAM_EPS: f64 = 1e-8;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected ADAM update at step `t` (1-based). Gradients missing
/// from `grads` count as zero.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    betas: (f64, f64),
    t: usize,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient for parameter {name}")));
        }
    }
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            pd[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Mean absolute error between two equally shaped tensors.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "L1 loss between {:?} and {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.numel() as f64)
}

/// Paired HR/LR training volumes.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub pairs: Vec<(Volume, Volume)>,
}

impl TrainingSet {
    /// Degrades each HR volume with the configured blur.
    pub fn from_hr(hr: Vec<Volume>, cfg: &ExperimentConfig) -> Result<Self> {
        let s = cfg.model.scale;
        let sigma = cfg.data.blur.then(|| cfg.data.blur_sigma.unwrap_or(default_blur_sigma(s)));
        let pairs = hr
            .into_iter()
            .map(|h| {
                let l = degrade(&h, s, sigma)?;
                Ok((h, l))
            })
            .collect::<Result<Vec<_>>>()?;
        if pairs.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        Ok(Self { pairs })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_csv(trace: &[LossRecord]) -> String {
    let mut s = String::from("iter,loss,lr\n");
    for r in trace {
        writeln!(s, "{},{:e},{:e}", r.iter, r.loss, r.lr).unwrap();
    }
    s
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub iteration: usize,
    pub model: Mtvnet,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Mtvnet::new(cfg.model.clone(), cfg.train.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(1);
        Ok(Self {
            iteration: 0,
            model,
            adam: AdamState::default(),
            rng,
        })
    }

    pub fn lr(&self, train: &TrainConfig) -> f64 {
        train.lr_at(self.iteration)
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut store = self.model.params.clone();
        for (k, t) in &self.adam.m {
            store.insert(format!("{ADAM_M}{k}"), t.clone());
        }
        for (k, t) in &self.adam.v {
            store.insert(format!("{ADAM_V}{k}"), t.clone());
        }
        let meta: BTreeMap<String, String> = [
            ("iteration", self.iteration.to_string()),
            ("rng_seed", hex(&self.rng.get_seed())),
            ("rng_stream", self.rng.get_stream().to_string()),
            ("rng_word_pos", self.rng.get_word_pos().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        store.to_checkpoint(&meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_checkpoint())
    }

    /// Restores a training state. Checkpoints holding only model weights
    /// resume with fresh optimizer moments.
    pub fn load(path: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let (store, meta) = ParamStore::load(path)?;
        let mut params = ParamStore::new();
        let mut adam = AdamState::default();
        for (k, t) in store.iter() {
            if let Some(n) = k.strip_prefix(ADAM_M) {
                adam.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = k.strip_prefix(ADAM_V) {
                adam.v.insert(n.to_string(), t.clone());
            } else {
                params.insert(k.clone(), t.clone());
            }
        }
        let model = Mtvnet::from_params(cfg.model.clone(), params)?;
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::format(path, format!("missing meta {k}")));
        let parse_err = |k: &str| Error::format(path, format!("bad meta {k}"));
        let iteration = get("iteration")?.parse().map_err(|_| parse_err("iteration"))?;
        let seed = unhex(get("rng_seed")?).ok_or_else(|| parse_err("rng_seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(get("rng_stream")?.parse().map_err(|_| parse_err("rng_stream"))?);
        rng.set_word_pos(get("rng_word_pos")?.parse().map_err(|_| parse_err("rng_word_pos"))?);
        Ok(Self {
            iteration,
            model,
            adam,
            rng,
        })
    }
}

/// Model weights only, with the iteration as metadata.
pub fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<Mtvnet> {
    Ok(TrainState::load(path, cfg)?.model)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

/// Draws a batch: a volume per sample, then a uniformly placed nested patch.
pub fn sample_batch<R: Rng>(data: &TrainingSet, cfg: &ExperimentConfig, rng: &mut R) -> Result<Vec<NestedPatch>> {
    (0..cfg.train.batch_size)
        .map(|_| {
            let (hr, lr) = &data.pairs[rng.gen_range(0..data.pairs.len())];
            sample_nested(lr, hr, &cfg.model, cfg.data.padding, rng)
        })
        .collect()
}

/// Stacks per-level contexts and HR targets of a batch.
pub fn batch_tensors(batch: &[NestedPatch]) -> (Vec<Tensor>, Tensor) {
    let levels = batch[0].lr_contexts.len();
    let contexts = (0..levels)
        .map(|l| Volume::batch_tensor(&batch.iter().map(|p| &p.lr_contexts[l]).collect::<Vec<_>>()))
        .collect();
    let target = Volume::batch_tensor(&batch.iter().map(|p| &p.hr_target).collect::<Vec<_>>());
    (contexts, target)
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(model: &Mtvnet, contexts: &[Tensor], target: &Tensor) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let xs: Vec<_> = contexts.iter().map(|t| g.constant(t.clone())).collect();
    let y = forward(&mut g, &p, &model.cfg, &xs)?;
    let t = g.constant(target.clone());
    let loss = g.l1_loss(y, t);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut grads = g.backward(loss);
    let map = p
        .iter()
        .filter_map(|(k, v)| grads.take(*v).map(|t| (k.clone(), t)))
        .collect();
    Ok((value, map))
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm = grads
        .values()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// One optimizer step; returns the record of the step just taken.
pub fn train_step(state: &mut TrainState, data: &TrainingSet, cfg: &ExperimentConfig) -> Result<LossRecord> {
    let batch = sample_batch(data, cfg, &mut state.rng)?;
    let (contexts, target) = batch_tensors(&batch);
    let (loss, mut grads) = loss_and_grads(&state.model, &contexts, &target)?;
    if let Some(c) = cfg.train.grad_clip {
        clip_global_norm(&mut grads, c);
    }
    let lr = state.lr(&cfg.train);
    adam_step(
        &mut state.model.params,
        &mut state.adam,
        &grads,
        lr,
        cfg.train.betas,
        state.iteration + 1,
    )?;
    state.iteration += 1;
    Ok(LossRecord {
        iter: state.iteration,
        loss,
        lr,
    })
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn checkpoint(&self, iteration: usize) -> PathBuf {
        self.root.join(format!("ckpt_{iteration:07}.mtvckpt"))
    }

    pub fn last(&self) -> PathBuf {
        self.root.join("last.mtvckpt")
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.cfg")
    }
}

/// Runs until `until` completed iterations. Writes checkpoints every
/// `checkpoint_every` steps and at the end, plus the loss trace, when a run
/// directory is given. `trace` holds earlier records when resuming.
pub fn train(
    state: &mut TrainState,
    data: &TrainingSet,
    cfg: &ExperimentConfig,
    until: usize,
    run: Option<&RunDir>,
    trace: &mut Vec<LossRecord>,
) -> Result<()> {
    if let Some(run) = run {
        write_atomic(&run.config(), cfg.to_text().as_bytes())?;
    }
    while state.iteration < until {
        let rec = train_step(state, data, cfg)?;
        trace.push(rec);
        if rec.iter % 50 == 0 || rec.iter == until {
            info!("iter {:>6}  loss {:.5}  lr {:.2e}", rec.iter, rec.loss, rec.lr);
        }
        if let Some(run) = run {
            let at_interval = rec.iter % cfg.train.checkpoint_every == 0;
            if at_interval || rec.iter == until {
                let bytes = state.to_checkpoint();
                if at_interval {
                    write_atomic(&run.checkpoint(rec.iter), &bytes)?;
                }
                write_atomic(&run.last(), &bytes)?;
                write_atomic(&run.loss_csv(), loss_csv(trace).as_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads a loss trace written by [`loss_csv`].
pub fn parse_loss_csv(text: &str) -> Result<Vec<LossRecord>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Data(format!("bad loss trace line '{l}'"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossRecord {
                iter: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Mean PSNR of the model and of whole-volume trilinear upsampling on the
/// same seeded training patches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchComparison {
    pub model_psnr: f64,
    pub baseline_psnr: f64,
    pub patches: usize,
}

pub fn compare_on_patches(
    model: &Mtvnet,
    data: &TrainingSet,
    cfg: &ExperimentConfig,
    patches: usize,
    seed: u64,
) -> Result<PatchComparison> {
    let s = cfg.model.scale;
    let upsampled: Vec<Volume> = data.pairs.iter().map(|(_, lr)| trilinear_upsample(lr, s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pm, mut pb) = (0.0, 0.0);
    for _ in 0..patches {
        let i = rng.gen_range(0..data.pairs.len());
        let (hr, lr) = &data.pairs[i];
        let patch = sample_nested(lr, hr, &cfg.model, cfg.data.padding, &mut rng)?;
        let (contexts, target) = batch_tensors(std::slice::from_ref(&patch));
        let pred = model.predict(&contexts)?;
        let inner = cfg.model.finest().context;
        let origin = patch.center.map(|c| ((c - inner / 2) * s) as isize);
        let base = upsampled[i].crop(origin, [inner * s; 3], false)?;
        pm += psnr(pred.data(), target.data());
        pb += psnr(base.data(), target.data());
    }
    Ok(PatchComparison {
        model_psnr: pm / patches as f64,
        baseline_psnr: pb / patches as f64,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(&[2], vec![1.0, -2.0]));
        let mut st = AdamState::default();
        st.m.insert("w".into(), Tensor::new(&[2], vec![0.5, 0.5]));
        st.v.insert("w".into(), Tensor::new(&[2], vec![0.0, 0.0]));
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        // with zero moments except m, parameters still move; start from zero moments
        let mut fresh = AdamState::default();
        adam_step(&mut params, &mut fresh, &grads, 1e-3, (0.9, 0.999), 1).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0]);
        // moments decay
        adam_step(&mut params, &mut st, &grads, 0.0, (0.9, 0.999), 1).unwrap();
        assert_eq!(st.m["w"].data(), &[0.45, 0.45]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.0));
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::scalar(1.0))].into_iter().collect();
        let mut st = AdamState::default();
        adam_step(&mut params, &mut st, &grads, 1e-3, (0.9, 0.999), 1).unwrap();
        // m^ = 0.1 / 0.1 = 1, v^ = 0.001 / 0.001 = 1 -> step = lr / (1 + eps)
        let expected = -1e-3 / (1.0 + ADAM_EPS);
        assert!((params.get("w").unwrap().item() - expected).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(0.0));
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::scalar(f64::NAN))].into_iter().collect();
        let e = adam_step(&mut params, &mut AdamState::default(), &grads, 1e-3, (0.9, 0.999), 1).unwrap_err();
        assert!(e.to_string().contains("parameter w"));
    }

    #[test]
    fn l1_hand_cases() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(l1_loss(&t, &t).unwrap(), 0.0);
        assert!((l1_loss(&t.map(|v| v + 0.5), &t).unwrap() - 0.5).abs() < 1e-15);
        assert!(l1_loss(&t, &Tensor::zeros(&[6])).is_err());
    }

    #[test]
    fn loss_csv_round_trip() {
        let tr = vec![
            LossRecord { iter: 1, loss: 0.25, lr: 1e-3 },
            LossRecord { iter: 2, loss: 0.125, lr: 5e-4 },
        ];
        assert_eq!(parse_loss_csv(&loss_csv(&tr)).unwrap(), tr);
    }
}
