//! Mini-batch SGD with momentum, a step-halving learning rate, a decaying
//! auxiliary-loss weight, per-epoch validation and checkpointing.

mod checkpoint;
mod eval;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use eval::{evaluate, rank_of, Accuracy, EvalMode, Predictor};

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{augment_train, stack, Dataset};
use crate::error::{bail, Error, Result};
use crate::graph::{HeadGrads, Init, Network, NetworkGraph, ParamMap};
use crate::layers::{LayerParams, Mode};
use crate::rng::{derive_seed, derived_stream};
use crate::supervision::{alpha_at, softmax_xent, AlphaDecay, LabelBatch, SupervisionSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs between learning-rate halvings.
    pub lr_period: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha0: f64,
    pub alpha_decay: AlphaDecay,
    pub seed: u64,
    /// Std of the Gaussian weight init (biases start at zero).
    pub init_std: f64,
    /// Training crop side; `None` keeps the stored size (flips only).
    pub crop: Option<usize>,
    /// Crop used for the per-epoch validation pass.
    pub val_mode: EvalMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            lr: 0.01,
            lr_period: 10,
            momentum: 0.9,
            weight_decay: 0.0,
            alpha0: 0.3,
            alpha_decay: AlphaDecay::Closed,
            seed: 0,
            init_std: 0.01,
            crop: None,
            val_mode: EvalMode::Center,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults for a network built at channel multiplier
    /// `width`: batch 64, 32-pixel crops, 30 epochs, and the init std
    /// rescaled by [`width_scaled_std`].
    pub fn desk(width: f64) -> Self {
        let base = TrainConfig::default();
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            crop: Some(32),
            init_std: width_scaled_std(base.init_std, width),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_period == 0 {
            bail!(Config, "epochs, batch size and lr period must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must be in [0, 1), got {}", self.momentum);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight decay must be non-negative");
        }
        if !(self.init_std > 0.0) {
            bail!(Config, "init std must be positive");
        }
        if self.crop == Some(0) {
            bail!(Config, "crop size must be positive");
        }
        SupervisionSchedule::new(self.alpha0, self.epochs, self.alpha_decay)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Gaussian init std for a network whose channel counts are `width` times
/// the full-size ones. Fan-ins shrink by `width`, so `base / sqrt(width)`
/// gives every layer the same forward gain `base` gives the full network.
pub fn width_scaled_std(base: f64, width: f64) -> f64 {
    base / width.sqrt()
}

/// `lr0 * 0.5^floor(epoch / period)` for `0 <= epoch < N`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        bail!(Schedule, "epoch {epoch} is outside the {}-epoch run", cfg.epochs);
    }
    if cfg.lr_period == 0 {
        bail!(Schedule, "lr period must be positive");
    }
    Ok(cfg.lr * 0.5f64.powi((epoch / cfg.lr_period) as i32))
}

/// One momentum SGD update of a parameter pair:
/// `v <- momentum * v - lr * (g + wd * w)`, `w <- w + v`.
pub fn sgd_step(
    params: &mut LayerParams,
    grads: &LayerParams,
    velocity: &mut LayerParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (w, g, v) in [
        (&mut params.weights, &grads.weights, &mut velocity.weights),
        (&mut params.bias, &grads.bias, &mut velocity.bias),
    ] {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            bail!(
                Shape,
                "sgd step on {:?} with grad {:?} and velocity {:?}",
                w.shape(),
                g.shape(),
                v.shape()
            );
        }
        for ((w, g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = momentum * *v - lr * (g + weight_decay * *w);
            *w += *v;
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub train_loss_main: f64,
    /// `None` for networks without an auxiliary head.
    pub train_loss_aux: Option<f64>,
    pub val_top1: f64,
    pub val_top5: f64,
    /// Wall-clock time of the epoch. Not serialized, so checkpoints of
    /// identical runs are byte-identical; it only reaches `train_log.csv`.
    #[serde(skip)]
    pub seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,alpha,train_loss_main,train_loss_aux,val_top1,val_top5,seconds";

    pub fn csv_row(&self) -> String {
        let aux = self.train_loss_aux.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.epoch, self.lr, self.alpha, self.train_loss_main, aux, self.val_top1, self.val_top5, self.seconds
        )
    }
}

/// Main-head loss of a single mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss_main: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "epoch,batch,lr,loss_main";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.batch, self.lr, self.loss_main)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub top1: f64,
}

/// Hash of everything that must match for a checkpoint to be resumable.
pub fn config_hash(graph: &NetworkGraph, cfg: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(graph.to_json().as_bytes());
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A training run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    schedule: SupervisionSchedule,
    net: Network,
    velocity: ParamMap,
    next_epoch: usize,
    best: Option<BestEpoch>,
    best_params: Option<ParamMap>,
    log: Vec<EpochLog>,
    steps: Vec<StepLog>,
    hash: String,
}

impl Trainer {
    /// Fresh run: Gaussian(0, `init_std`) weights, zero biases and
    /// velocities.
    pub fn new(graph: NetworkGraph, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::init(graph, Init::Gaussian { std: cfg.init_std }, cfg.seed)?;
        let velocity = net.params().iter().map(|(k, p)| (k.clone(), p.zeros_like())).collect();
        Self::assemble(net, cfg, velocity, 0, None, vec![])
    }

    /// Continues a run from a checkpoint taken with the same graph and
    /// config.
    pub fn resume(graph: NetworkGraph, cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let hash = config_hash(&graph, &cfg);
        if ckpt.config_hash != hash || ckpt.seed != cfg.seed {
            bail!(Config, "checkpoint was written by a different graph or training config");
        }
        if ckpt.epoch > cfg.epochs {
            bail!(Config, "checkpoint epoch {} is past the {}-epoch run", ckpt.epoch, cfg.epochs);
        }
        let net = Network::new(graph, ckpt.params)?;
        for (id, p) in net.params() {
            match ckpt.velocity.get(id) {
                Some(v) if v.weights.shape() == p.weights.shape() && v.bias.shape() == p.bias.shape() => {}
                _ => bail!(Config, "checkpoint velocity for {id} is missing or misshaped"),
            }
        }
        Self::assemble(net, cfg, ckpt.velocity, ckpt.epoch, ckpt.best, ckpt.log)
    }

    fn assemble(
        net: Network,
        cfg: TrainConfig,
        velocity: ParamMap,
        next_epoch: usize,
        best: Option<BestEpoch>,
        log: Vec<EpochLog>,
    ) -> Result<Self> {
        let schedule = SupervisionSchedule::new(cfg.alpha0, cfg.epochs, cfg.alpha_decay)?;
        let hash = config_hash(net.graph(), &cfg);
        Ok(Trainer {
            cfg,
            schedule,
            net,
            velocity,
            next_epoch,
            best,
            best_params: None,
            log,
            steps: vec![],
            hash,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch >= self.cfg.epochs
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    /// Per-batch losses of the epochs run by this instance.
    pub fn steps(&self) -> &[StepLog] {
        &self.steps
    }

    pub fn best(&self) -> Option<&BestEpoch> {
        self.best.as_ref()
    }

    /// Parameters at the best epoch seen by this instance, if it improved
    /// on the best so far.
    pub fn best_params(&self) -> Option<&ParamMap> {
        self.best_params.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.next_epoch,
            seed: self.cfg.seed,
            config_hash: self.hash.clone(),
            best: self.best.clone(),
            log: self.log.clone(),
            params: self.net.params().clone(),
            velocity: self.velocity.clone(),
        }
    }

    fn crop_size(&self, data: &Dataset) -> Result<usize> {
        match (self.cfg.crop, data.geometry()) {
            (Some(c), _) => Ok(c),
            (None, Some((h, w))) if h == w => Ok(h),
            (None, Some((h, w))) => bail!(Config, "non-square {h}x{w} images need an explicit crop size"),
            (None, None) => bail!(Input, "empty dataset"),
        }
    }

    /// Runs the next epoch: shuffled mini-batches of augmented crops, one
    /// SGD step per batch, then a validation pass.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<&EpochLog> {
        if self.is_done() {
            bail!(State, "all {} epochs already ran", self.cfg.epochs);
        }
        if train.is_empty() {
            bail!(Input, "training set is empty");
        }
        let k = self.net.graph().num_classes;
        if train.num_classes() != k || val.num_classes() != k {
            bail!(Config, "network has {k} classes, datasets have {} / {}", train.num_classes(), val.num_classes());
        }
        let started = Instant::now();
        let epoch = self.next_epoch;
        let lr = lr_at(&self.cfg, epoch)?;
        let has_aux = self.net.graph().has_aux();
        let alpha = if has_aux { alpha_at(&self.schedule, epoch)? } else { 0.0 };
        let crop = self.crop_size(train)?;
        let seed = self.cfg.seed;

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derived_stream(seed, &format!("shuffle/{epoch}")));
        let mut crop_rng = derived_stream(seed, &format!("crop/{epoch}"));

        let main_head = self.net.graph().main_head().node.clone();
        let aux_heads: Vec<String> = self.net.graph().aux_heads().map(|h| h.node.clone()).collect();
        let (mut sum_main, mut sum_aux, mut seen) = (0.0, 0.0, 0usize);

        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let crops = idx
                .iter()
                .map(|&i| augment_train(&train.images[i], crop, &mut crop_rng))
                .collect::<Result<Vec<Tensor>>>()?;
            let images = stack(&crops)?;
            let labels = LabelBatch::new(idx.iter().map(|&i| train.labels[i]).collect(), k)?;
            let mut pass = self.net.forward(&images, Mode::Train, derive_seed(seed, &format!("batch/{epoch}/{b}")))?;

            let diverged = |what: &str| Error::Numeric(format!("non-finite {what} at epoch {epoch}, batch {b}"));
            let mut head_grads = HeadGrads::new();
            let logits = pass.head(&main_head).expect("main head always runs");
            if !logits.is_finite() {
                return Err(diverged("main logits"));
            }
            let (loss_main, g) = softmax_xent(logits, &labels)?;
            if !loss_main.is_finite() {
                return Err(diverged("main loss"));
            }
            head_grads.insert(main_head.clone(), g);
            let mut loss_aux = 0.0;
            for h in &aux_heads {
                let logits = pass.head(h).expect("aux heads run in train mode");
                if !logits.is_finite() {
                    return Err(diverged("auxiliary logits"));
                }
                let (l, g) = softmax_xent(logits, &labels)?;
                loss_aux += l;
                // Zero weight: the head contributes nothing, so leave it out
                // and keep the shared trunk's arithmetic identical to a
                // network without the branch.
                if alpha != 0.0 {
                    head_grads.insert(h.clone(), g.scale(alpha));
                }
            }
            if !loss_aux.is_finite() {
                return Err(diverged("auxiliary loss"));
            }

            let grads = self.net.backward(&mut pass, &head_grads)?;
            let (momentum, wd) = (self.cfg.momentum, self.cfg.weight_decay);
            let velocity = &mut self.velocity;
            for (id, p) in self.net.params_mut() {
                let v = velocity.get_mut(id).expect("velocity for every parameter");
                sgd_step(p, &grads[id], v, lr, momentum, wd)?;
            }

            let n = idx.len();
            sum_main += loss_main * n as f64;
            sum_aux += loss_aux * n as f64;
            seen += n;
            self.steps.push(StepLog { epoch, batch: b, lr, loss_main });
        }

        let acc = evaluate(&self.net, val, crop, self.cfg.val_mode, self.cfg.batch_size)?;
        let improved = self.best.as_ref().is_none_or(|b| acc.top1 > b.top1);
        if improved {
            self.best = Some(BestEpoch { epoch, top1: acc.top1 });
            self.best_params = Some(self.net.params().clone());
        }
        self.next_epoch += 1;
        self.log.push(EpochLog {
            epoch,
            lr,
            alpha,
            train_loss_main: sum_main / seen as f64,
            train_loss_aux: has_aux.then(|| sum_aux / seen as f64),
            val_top1: acc.top1,
            val_top5: acc.top5,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(self.log.last().unwrap())
    }
}

/// Where [`train`] writes its artifacts.
pub struct TrainOutputs<'a> {
    pub dir: &'a Path,
    /// Echo each epoch's log row to stderr.
    pub verbose: bool,
}

/// Runs a trainer to completion. With `out`, writes `train_log.csv`,
/// `steps.csv`, `last.ckpt` after every epoch and `best.ckpt` whenever
/// validation top-1 improves.
pub fn train(trainer: &mut Trainer, train: &Dataset, val: &Dataset, out: Option<&TrainOutputs>) -> Result<()> {
    if let Some(o) = out {
        fs::create_dir_all(o.dir)?;
        let steps = o.dir.join("steps.csv");
        if trainer.next_epoch() == 0 || !steps.exists() {
            fs::write(&steps, format!("{}\n", StepLog::CSV_HEADER))?;
        }
    }
    while !trainer.is_done() {
        let before = trainer.steps().len();
        let row = trainer.run_epoch(train, val)?.clone();
        let Some(o) = out else { continue };
        if o.verbose {
            eprintln!("{}", row.csv_row());
        }
        let mut log = format!("{}\n", EpochLog::CSV_HEADER);
        for r in trainer.log() {
            log.push_str(&r.csv_row());
            log.push('\n');
        }
        fs::write(o.dir.join("train_log.csv"), log)?;
        let mut steps = fs::OpenOptions::new().append(true).open(o.dir.join("steps.csv"))?;
        for s in &trainer.steps()[before..] {
            writeln!(steps, "{}", s.csv_row())?;
        }
        let ckpt = trainer.checkpoint();
        ckpt.save(&o.dir.join("last.ckpt"))?;
        if trainer.best().map(|b| b.epoch) == Some(row.epoch) {
            ckpt.save(&o.dir.join("best.ckpt"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_conv_stack, ConvStackConfig};

    #[test]
    fn lr_schedule_values() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = [0, 9, 10, 20, 30, 40, 49].iter().map(|&e| lr_at(&cfg, e).unwrap()).collect();
        assert_eq!(lrs, [0.01, 0.01, 0.005, 0.0025, 0.00125, 0.000625, 0.000625]);
        assert!(matches!(lr_at(&cfg, 50), Err(Error::Schedule(_))));
        let quick = TrainConfig { lr: 1.0, lr_period: 1, ..Default::default() };
        assert_eq!(lr_at(&quick, 3).unwrap(), 0.125);
    }

    #[test]
    fn lr_is_piecewise_constant_with_expected_halvings() {
        for (n, period) in [(50, 10), (7, 3), (1, 1), (30, 10)] {
            let cfg = TrainConfig { epochs: n, lr_period: period, ..Default::default() };
            let lrs: Vec<f64> = (0..n).map(|e| lr_at(&cfg, e).unwrap()).collect();
            assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
            assert_eq!(drops, (n - 1) / period, "n={n} period={period}");
        }
    }

    fn pair(w: &[f64], b: f64) -> LayerParams {
        LayerParams::new(Tensor::new(vec![w.len()], w.to_vec()).unwrap().reshape(&[1, w.len()]).unwrap(), Tensor::new(vec![1], vec![b]).unwrap()).unwrap()
    }

    #[test]
    fn width_scaling_of_the_init() {
        assert_eq!(width_scaled_std(0.01, 1.0), 0.01);
        assert!((width_scaled_std(0.01, 0.125) - 0.01 * 8f64.sqrt()).abs() < 1e-15);
        assert_eq!(TrainConfig::desk(1.0).init_std, 0.01);
    }

    #[test]
    fn vanilla_sgd() {
        let mut p = pair(&[1.0, -2.0], 0.5);
        let mut v = p.zeros_like();
        sgd_step(&mut p, &pair(&[0.5, 1.0], -1.0), &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, pair(&[0.95, -2.1], 0.6));
    }

    #[test]
    fn zero_grad_is_a_fixed_point() {
        let mut p = pair(&[1.0, -2.0], 0.5);
        let before = p.clone();
        let mut v = p.zeros_like();
        let zero = p.zeros_like();
        sgd_step(&mut p, &zero, &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_recurrence_on_a_quadratic() {
        // f(w) = c/2 w^2, g = c w. Hand-unrolled recurrence for two steps.
        let (c, lr, m, wd) = (3.0, 0.05, 0.9, 0.01);
        let w0 = 1.7;
        let v1 = -lr * (c * w0 + wd * w0);
        let w1 = w0 + v1;
        let v2 = m * v1 - lr * (c * w1 + wd * w1);
        let w2 = w1 + v2;

        let mut p = pair(&[w0], 0.0);
        let mut v = p.zeros_like();
        for _ in 0..2 {
            let g = pair(&[c * p.weights.data()[0]], 0.0);
            sgd_step(&mut p, &g, &mut v, lr, m, wd).unwrap();
        }
        assert!((p.weights.data()[0] - w2).abs() < 1e-12);
        assert!((v.weights.data()[0] - v2).abs() < 1e-12);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = pair(&[1.0, 2.0], 0.0);
        let mut v = p.zeros_like();
        assert!(matches!(sgd_step(&mut p, &pair(&[1.0], 0.0), &mut v, 0.1, 0.0, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { lr_period: 0, ..Default::default() },
            TrainConfig { alpha0: -0.1, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { crop: Some(0), ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::stream(seed);
        let mut images = vec![];
        let mut labels = vec![];
        for i in 0..n {
            let l = i % 3;
            images.push(crate::data::preprocess(&crate::data::synthetic::render(l, 10, 10.0, &mut rng), &[120.0; 3]).unwrap());
            labels.push(l);
        }
        Dataset { images, labels, classes: vec!["h".into(), "v".into(), "d".into()], mean: [120.0; 3] }
    }

    fn toy_graph() -> NetworkGraph {
        build_conv_stack(&ConvStackConfig { depth: 2, base_channels: 4, growth: 1.0, input_shape: [3, 8, 8], num_classes: 3 }).unwrap()
    }

    fn toy_cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 8, lr: 0.01, lr_period: 2, crop: Some(8), init_std: 0.05, seed: 3, ..Default::default() }
    }

    #[test]
    fn training_reduces_loss_on_a_toy_problem() {
        let (tr, va) = (toy_data(48, 1), toy_data(12, 2));
        let mut t = Trainer::new(toy_graph(), toy_cfg(6)).unwrap();
        train(&mut t, &tr, &va, None).unwrap();
        let log = t.log();
        assert_eq!(log.len(), 6);
        assert!(log[5].train_loss_main < log[0].train_loss_main, "{log:?}");
        assert!(log.iter().all(|r| r.train_loss_aux.is_none() && r.alpha == 0.0));
        assert!(t.run_epoch(&tr, &va).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (tr, va) = (toy_data(24, 1), toy_data(6, 2));
        let mut full = Trainer::new(toy_graph(), toy_cfg(4)).unwrap();
        train(&mut full, &tr, &va, None).unwrap();

        let mut first = Trainer::new(toy_graph(), toy_cfg(4)).unwrap();
        first.run_epoch(&tr, &va).unwrap();
        first.run_epoch(&tr, &va).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let mut resumed = Trainer::resume(toy_graph(), toy_cfg(4), Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        train(&mut resumed, &tr, &va, None).unwrap();

        assert_eq!(resumed.network().params(), full.network().params());
        let strip = |l: &[EpochLog]| l.iter().map(|r| (r.train_loss_main, r.val_top1)).collect::<Vec<_>>();
        assert_eq!(strip(resumed.log()), strip(full.log()));
        assert_eq!(resumed.steps(), &full.steps()[full.steps().len() - resumed.steps().len()..]);
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let t = Trainer::new(toy_graph(), toy_cfg(4)).unwrap();
        let ckpt = t.checkpoint();
        assert!(matches!(
            Trainer::resume(toy_graph(), TrainConfig { lr: 0.02, ..toy_cfg(4) }, ckpt),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn divergence_names_epoch_and_batch() {
        let (tr, va) = (toy_data(24, 1), toy_data(6, 2));
        let mut t = Trainer::new(toy_graph(), TrainConfig { lr: 1e12, init_std: 1.0, ..toy_cfg(3) }).unwrap();
        let err = train(&mut t, &tr, &va, None).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, va) = (toy_data(16, 1), toy_data(6, 2));
        let mut t = Trainer::new(toy_graph(), toy_cfg(2)).unwrap();
        train(&mut t, &tr, &va, Some(&TrainOutputs { dir: dir.path(), verbose: false })).unwrap();
        let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 3);
        assert_eq!(log.lines().next().unwrap(), EpochLog::CSV_HEADER);
        let steps = fs::read_to_string(dir.path().join("steps.csv")).unwrap();
        assert_eq!(steps.lines().count(), 1 + 2 * 2);
        let last = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(last.epoch, 2);
        assert_eq!(&last.params, t.network().params());
        assert!(dir.path().join("best.ckpt").exists());
    }
}
