//! Recursive training forward pass, optimisation loop and loss log.

pub mod adam;
pub mod embedder;
pub mod loss;
pub mod synth;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{asym_atten_block, ReferenceView};
use crate::error::{Error, Result};
use crate::mask::{downsample_mask, get_peel, MaskPlane, PeelWidth, Reduce};
use crate::network::{init_params, Checkpoint, Network, NetworkConfig};
use crate::tensor::{Element, Tensor};

pub use adam::{adam_step, learning_rate, AdamConfig, AdamState};
pub use embedder::{EmbedderConfig, PerceptualEmbedder};
pub use loss::{gram, loss_perceptual, loss_pixel, loss_total, loss_tv, LossBreakdown, LossTerms, LossWeights};
pub use synth::{draw_sample, synth_sample, AffineRanges, DataSource, SynthConfig, TrainSample};

pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const LOSS_LOG_HEADER: &str = "# step, L_peel, L_valid, L_content, L_style, L_tv, total, lr";

/// Every training constant; serialisable as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub synth: SynthConfig,
    pub peel_width: u32,
    pub max_recursions: usize,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub embedder: EmbedderConfig,
    pub seed: u64,
    /// Draw one sample at start-up and train on it every step.
    pub fixed_scene: bool,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            network: NetworkConfig::paper(),
            synth: SynthConfig::new(256),
            peel_width: 8,
            max_recursions: 5,
            batch_size: 4,
            steps: 500_000,
            lr: 1e-4,
            lr_decay_factor: 10.0,
            lr_decay_interval: 100_000,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            embedder: EmbedderConfig::default(),
            seed: 0,
            fixed_scene: false,
            checkpoint_every: 10_000,
            image_dir: None,
            mask_dir: None,
        }
    }

    /// 64×64 samples and the 16-channel network; the decay interval keeps
    /// the full-scale ratio of one decay per fifth of the run.
    pub fn desk() -> Self {
        TrainConfig {
            network: NetworkConfig::desk(),
            synth: SynthConfig::new(64),
            steps: 20_000,
            lr_decay_interval: 4_000,
            checkpoint_every: 1_000,
            ..Self::paper()
        }
    }

    /// Desk network memorising one fixed scene at a constant learning rate.
    pub fn overfit() -> Self {
        TrainConfig {
            batch_size: 1,
            steps: 2_000,
            lr_decay_interval: 100_000,
            fixed_scene: true,
            checkpoint_every: 0,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "overfit" => Ok(Self::overfit()),
            other => Err(Error::Config(format!("unknown preset {other:?} (paper, desk, overfit)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        PeelWidth::new(self.peel_width)?;
        let s = self.synth.size;
        if s == 0 || s % 8 != 0 {
            return Err(Error::Config(format!("sample size {s} must be a positive multiple of 8")));
        }
        if self.batch_size == 0 || self.max_recursions == 0 || self.lr_decay_interval == 0 {
            return Err(Error::Config("batch_size, max_recursions and lr_decay_interval must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr_decay_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        learning_rate(self.lr, self.lr_decay_factor, self.lr_decay_interval, step)
    }
}

/// Every intermediate of the recursive forward pass.
#[derive(Debug, Clone)]
pub struct TrainForward<T: Element = f32> {
    /// Decoder outputs X̂ʲ, `[3, S, S]`.
    pub raw: Vec<Tensor<T>>,
    /// Compositions Xʲ⁺¹ = (1 − Pʲ)·Xʲ + Pʲ·X̂ʲ.
    pub composed: Vec<Tensor<T>>,
    pub peels: Vec<MaskPlane>,
    /// Hole left over when the recursion limit was reached.
    pub remaining: MaskPlane,
}

/// Run the onion-peel loop on view 0 of `sample`, keeping the graph.
/// References are encoded once per call; the loop stops after
/// `max_recursions` even if hole remains.
pub fn forward_train<T: Element>(
    sample: &TrainSample,
    net: &Network<T>,
    peel_width: PeelWidth,
    max_recursions: usize,
) -> Result<TrainForward<T>> {
    let size = sample.size();
    if size % 4 != 0 {
        return Err(Error::invalid(format!("sample size {size} is not a multiple of 4")));
    }
    let hole = &sample.holes[0];
    if hole.is_full() {
        return Err(Error::DegenerateMask("training target hole covers the whole frame".into()));
    }
    let mut refs = Vec::with_capacity(sample.views.len() - 1);
    for l in 1..sample.views.len() {
        let e = net.encode(&sample.views[l].to_tensor::<T>(), &sample.holes[l], &sample.validity[l])?;
        refs.push((l, e, downsample_mask(&sample.validity[l], 4, Reduce::All)));
    }
    let views: Vec<ReferenceView<T>> = refs
        .iter()
        .map(|(l, e, v)| ReferenceView { frame: *l, key: &e.key, value: &e.value, validity: v })
        .collect();

    let grey = hole.to_tensor::<T>().mul_scalar(T::lit(crate::network::NEUTRAL_GREY));
    let mut x = sample.ground_truth().to_tensor::<T>().mul(&hole.complement().to_tensor::<T>())?.add(&grey)?;
    let validity = &sample.validity[0];
    let mut h = hole.clone();
    let mut out = TrainForward { raw: Vec::new(), composed: Vec::new(), peels: Vec::new(), remaining: h.clone() };
    while !h.is_empty() && out.peels.len() < max_recursions {
        let peel = get_peel(&h, peel_width)?;
        let e = net.encode(&x, &h, validity)?;
        let peel_feat = downsample_mask(&peel, 4, Reduce::Any);
        let z = match asym_atten_block(0, &e.key, &e.value, &peel_feat, &views, 1.0) {
            Ok(b) => b.z,
            Err(Error::NoValidReference) => e.value,
            Err(err) => return Err(err),
        };
        let raw = net.decode(&z, &peel_feat)?;
        let p = peel.to_tensor::<T>();
        x = x.mul(&peel.complement().to_tensor::<T>())?.add(&raw.mul(&p)?)?;
        h = h.difference(&peel)?;
        out.raw.push(raw);
        out.composed.push(x.clone());
        out.peels.push(peel);
    }
    out.remaining = h;
    Ok(out)
}

/// The five loss components of one forward pass.
pub fn compute_losses<T: Element>(
    fwd: &TrainForward<T>,
    sample: &TrainSample,
    embedder: &PerceptualEmbedder,
) -> Result<LossTerms<T>> {
    let y = sample.ground_truth().to_tensor::<T>();
    let (peel, valid) = loss_pixel(&fwd.raw, &fwd.peels, &sample.validity[0], &y)?;
    let (content, style) = loss_perceptual(&fwd.composed, &y, embedder)?;
    let tv = loss_tv(&fwd.composed)?;
    Ok(LossTerms { peel, valid, content, style, tv })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub lr: f64,
}

impl LossRecord {
    pub fn line(&self) -> String {
        let l = &self.losses;
        format!("{}, {}, {}, {}, {}, {}, {}, {}", self.step, l.peel, l.valid, l.content, l.style, l.tv, l.total, self.lr)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 8 {
            return Err(Error::invalid(format!("loss log line has {} fields", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::invalid(format!("loss log field {s:?}: {e}")));
        Ok(LossRecord {
            step: f[0].parse().map_err(|e| Error::invalid(format!("loss log step {:?}: {e}", f[0])))?,
            losses: LossBreakdown {
                peel: num(f[1])?,
                valid: num(f[2])?,
                content: num(f[3])?,
                style: num(f[4])?,
                tv: num(f[5])?,
                total: num(f[6])?,
            },
            lr: num(f[7])?,
        })
    }
}

/// Single-writer optimiser over one checkpoint.
pub struct Trainer {
    config: TrainConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f32>>,
    last_good: Vec<Vec<f32>>,
    adam: AdamState,
    step: u64,
    embedder: PerceptualEmbedder,
    data: DataSource,
    rng: ChaCha8Rng,
    fixed: Option<TrainSample>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: DataSource, init: Option<Checkpoint>) -> Result<Self> {
        Self::with_embedder(config, data, init, None)
    }

    pub fn with_embedder(
        config: TrainConfig,
        data: DataSource,
        init: Option<Checkpoint>,
        embedder: Option<PerceptualEmbedder>,
    ) -> Result<Self> {
        config.validate()?;
        let ckpt = match init {
            Some(c) => {
                // Validates names and shapes.
                Network::<f32>::from_checkpoint(&c, &config.network, false, false)?;
                c
            }
            None => init_params(&config.network, config.network.init_seed)?,
        };
        let reference = Network::<f32>::from_checkpoint(&ckpt, &config.network, false, false)?;
        let (mut names, mut shapes, mut values) = (Vec::new(), Vec::new(), Vec::new());
        for (name, t) in reference.parameters() {
            names.push(name);
            shapes.push(t.shape().to_vec());
            values.push(t.to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fixed = if config.fixed_scene { Some(draw_sample(&data, &config.synth, &mut rng)?) } else { None };
        Ok(Trainer {
            adam: AdamState::new(values.iter().map(Vec::len)),
            last_good: values.clone(),
            embedder: embedder.unwrap_or_else(|| PerceptualEmbedder::new(&config.embedder)),
            step: ckpt.step,
            names,
            shapes,
            values,
            data,
            rng,
            fixed,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn embedder(&self) -> &PerceptualEmbedder {
        &self.embedder
    }

    pub fn fixed_sample(&self) -> Option<&TrainSample> {
        self.fixed.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Self::pack(&self.names, &self.shapes, &self.values, &self.config, self.step)
    }

    /// Parameters in effect before the most recent update.
    pub fn last_good_checkpoint(&self) -> Checkpoint {
        Self::pack(&self.names, &self.shapes, &self.last_good, &self.config, self.step.saturating_sub(1))
    }

    fn pack(names: &[String], shapes: &[Vec<usize>], values: &[Vec<f32>], cfg: &TrainConfig, step: u64) -> Checkpoint {
        let params = names
            .iter()
            .zip(shapes)
            .zip(values)
            .map(|((n, s), v)| (n.clone(), Tensor::from_vec(v.clone(), s).expect("stored shapes are valid")))
            .collect();
        Checkpoint { params, fingerprint: cfg.network.fingerprint(), step }
    }

    /// Losses of the current parameters on `sample`, without updating.
    pub fn evaluate(&self, sample: &TrainSample) -> Result<LossBreakdown> {
        let ckpt = self.checkpoint();
        let net = Network::<f32>::from_checkpoint(&ckpt, &self.config.network, false, false)?;
        let fwd = forward_train(sample, &net, PeelWidth::new(self.config.peel_width)?, self.config.max_recursions)?;
        compute_losses(&fwd, sample, &self.embedder)?.breakdown(&self.config.weights, self.step)
    }

    /// One optimisation step on a freshly drawn (or the fixed) batch.
    /// Returns the batch-mean losses measured before the update.
    pub fn step(&mut self) -> Result<LossRecord> {
        let cfg = &self.config;
        let lr = cfg.learning_rate(self.step);
        let batch: Vec<TrainSample> = match &self.fixed {
            Some(s) => vec![s.clone(); cfg.batch_size],
            None => (0..cfg.batch_size).map(|_| draw_sample(&self.data, &cfg.synth, &mut self.rng)).collect::<Result<_>>()?,
        };
        let leaves: Vec<Tensor<f32>> = self
            .values
            .iter()
            .zip(&self.shapes)
            .map(|(v, s)| Tensor::from_vec(v.clone(), s).map(|t| t.with_requires_grad(true)))
            .collect::<Result<_>>()?;
        let map: BTreeMap<String, Tensor<f32>> = self.names.iter().cloned().zip(leaves.iter().cloned()).collect();
        let net = Network::from_parameters(&cfg.network, &map)?;
        let p = PeelWidth::new(cfg.peel_width)?;
        let inv_b = 1.0 / cfg.batch_size as f64;
        let mut sum = [0.0f64; 5];
        for sample in &batch {
            let fwd = forward_train(sample, &net, p, cfg.max_recursions)?;
            let terms = compute_losses(&fwd, sample, &self.embedder)?;
            let b = terms.breakdown(&cfg.weights, self.step)?;
            for (acc, v) in sum.iter_mut().zip(b.components()) {
                *acc += v * inv_b;
            }
            terms.total(&cfg.weights)?.mul_scalar(inv_b as f32).backward()?;
        }
        let losses = LossBreakdown::new(sum, &cfg.weights, self.step)?;
        let grads: Vec<Vec<f32>> = leaves.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()])).collect();
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { component: format!("gradient of {}", self.names[i]), step: self.step });
        }
        self.last_good.clone_from(&self.values);
        adam_step(&mut self.values, &grads, &mut self.adam, lr, &cfg.adam)?;
        let record = LossRecord { step: self.step, losses, lr };
        self.step += 1;
        Ok(record)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
    /// Set when training stopped early; `checkpoint` is then the last
    /// parameters that produced a finite loss.
    pub aborted: Option<Error>,
}

/// Run `config.steps` steps. With `out_dir`, appends to the loss log,
/// writes periodic checkpoints to `out_dir/checkpoint` and a final one.
pub fn train_loop(config: TrainConfig, data: DataSource, init: Option<Checkpoint>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let steps = config.steps;
    let every = config.checkpoint_every;
    let net_cfg = config.network.clone();
    let mut trainer = Trainer::new(config, data, init)?;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("train_config.toml"), trainer.config().to_toml())?;
            let path = dir.join(LOSS_LOG_FILE);
            let fresh = !path.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "{LOSS_LOG_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let save = |ckpt: &Checkpoint| -> Result<()> {
        if let Some(dir) = out_dir {
            ckpt.save(&dir.join("checkpoint"), &net_cfg)?;
        }
        Ok(())
    };
    let mut log = Vec::new();
    for _ in 0..steps {
        match trainer.step() {
            Ok(rec) => {
                if let Some(f) = log_file.as_mut() {
                    append(f, &rec)?;
                }
                if rec.step % 100 == 0 {
                    info!("step {} total {:.5} lr {:e}", rec.step, rec.losses.total, rec.lr);
                }
                log.push(rec);
                if every > 0 && trainer.step_count() % every == 0 {
                    save(&trainer.checkpoint())?;
                }
            }
            Err(e @ Error::NonFiniteLoss { .. }) => {
                let ckpt = if log.is_empty() { trainer.checkpoint() } else { trainer.last_good_checkpoint() };
                save(&ckpt)?;
                return Ok(TrainOutcome { checkpoint: ckpt, log, aborted: Some(e) });
            }
            Err(e) => return Err(e),
        }
    }
    let ckpt = trainer.checkpoint();
    save(&ckpt)?;
    Ok(TrainOutcome { checkpoint: ckpt, log, aborted: None })
}

fn append(f: &mut File, rec: &LossRecord) -> Result<()> {
    writeln!(f, "{}", rec.line())?;
    Ok(())
}
