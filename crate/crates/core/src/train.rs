//! PSNR-loss optimization: AdamW, cosine annealing, augmentation, patch
//! sampling, deterministic training loop and checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{ensure, Error, Result};
use crate::model::Network;
use crate::nn::Ctx;
use crate::params::{Binding, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::weights::{self, AnyTensor, Entry};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub aug_prob: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            lr_final: 1e-6,
            total_iters: 2000,
            beta1: 0.9,
            beta2: 0.9,
            weight_decay: 1e-4,
            eps: 1e-8,
            batch_size: 8,
            patch_size: 64,
            aug_prob: 0.5,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr_final <= self.lr_init,
            "train config",
            "lr_final must not exceed lr_init"
        );
        ensure!(
            (0.0..=1.0).contains(&self.aug_prob),
            "train config",
            "aug_prob must lie in [0,1]"
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "train config",
            "Adam betas must lie in [0,1)"
        );
        ensure!(
            self.batch_size > 0 && self.patch_size > 0,
            "train config",
            "batch and patch size must be positive"
        );
        ensure!(
            self.total_iters > 0,
            "train config",
            "total_iters must be positive"
        );
        Ok(())
    }
}

/// `lr_final + (lr_init - lr_final) * (1 + cos(pi * iter / total)) / 2`.
pub fn cosine_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    let t = (iter.min(cfg.total_iters) as f64) / cfg.total_iters as f64;
    cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// An input image and its restoration target, both `[1, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
}

/// Horizontal flip with probability `p`, then with probability `p` a
/// rotation by 90, 180 or 270 degrees; the same transform hits both images.
pub fn augment<T: Real, R: Rng + ?Sized>(pair: Pair<T>, p: f64, rng: &mut R) -> Pair<T> {
    let flip = rng.random_bool(p);
    let rot = if rng.random_bool(p) {
        rng.random_range(1..=3)
    } else {
        0
    };
    let tf = |t: Tensor<T>| {
        let t = if flip { t.flip_h() } else { t };
        if rot > 0 {
            t.rot90(rot)
        } else {
            t
        }
    };
    Pair {
        input: tf(pair.input),
        target: tf(pair.target),
    }
}

/// Identical random `size x size` window from both images.
pub fn sample_patch<T: Real, R: Rng + ?Sized>(
    pair: &Pair<T>,
    size: usize,
    rng: &mut R,
) -> Result<Pair<T>> {
    let [_, _, h, w] = pair.input.dims4("sample_patch")?;
    let [_, _, th, tw] = pair.target.dims4("sample_patch")?;
    ensure!(
        (h, w) == (th, tw),
        "sample_patch",
        "input {h}x{w} and target {th}x{tw} differ"
    );
    ensure!(
        h >= size && w >= size,
        "sample_patch",
        "image {h}x{w} is smaller than patch {size}"
    );
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok(Pair {
        input: pair.input.crop(top, left, size, size)?,
        target: pair.target.crop(top, left, size, size)?,
    })
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.get(id).shape()))
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        ensure!(
            grads.len() == self.m.len(),
            "adamw",
            "{} gradients for {} parameters",
            grads.len(),
            self.m.len()
        );
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2_sqrt = (1.0 - b2.powi(self.step as i32)).sqrt();
        let step_size = lr / bc1;
        let decay = 1.0 - lr * self.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            ensure!(
                p.shape() == grads[i].shape() && p.shape() == self.m[i].shape(),
                "adamw",
                "state shape mismatch at parameter {i}"
            );
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v)
            {
                let g = gj.as_f64();
                let mn = b1 * mj.as_f64() + (1.0 - b1) * g;
                let vn = b2 * vj.as_f64() + (1.0 - b2) * g * g;
                *mj = T::of(mn);
                *vj = T::of(vn);
                let denom = vn.sqrt() / bc2_sqrt + self.eps;
                *pj = T::of(pj.as_f64() * decay - step_size * mn / denom);
            }
        }
        Ok(())
    }
}

/// One machine-parseable progress record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLine {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter={} lr={:.6e} loss={:.6} psnr={:.4}",
            self.iter, self.lr, self.loss, self.psnr
        )
    }
}

/// Random generator for one iteration; independent of how many iterations
/// ran before, so resumed runs draw the same batches.
pub fn iteration_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    rng
}

pub fn sample_batch<T: Real>(
    data: &[Pair<T>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Pair<T>> {
    ensure!(!data.is_empty(), "train", "dataset is empty");
    let mut inputs = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let src = &data[rng.random_range(0..data.len())];
        let patch = augment(sample_patch(src, cfg.patch_size, rng)?, cfg.aug_prob, rng);
        inputs.push(patch.input);
        targets.push(patch.target);
    }
    Ok(Pair {
        input: Tensor::stack_batch(&inputs)?,
        target: Tensor::stack_batch(&targets)?,
    })
}

/// Owns the parameters and optimizer state of one training run.
pub struct Trainer<'n, N, T> {
    pub net: &'n N,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    /// Number of completed iterations.
    pub iter: usize,
    /// Where to drop a diagnostic checkpoint if the loss diverges.
    pub diag_path: Option<PathBuf>,
}

impl<'n, N: Network, T: Real> Trainer<'n, N, T> {
    pub fn new(net: &'n N, store: ParamStore<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::from_config(&store, &cfg);
        Ok(Self {
            net,
            store,
            opt,
            cfg,
            iter: 0,
            diag_path: None,
        })
    }

    /// Loss and gradients of one batch at the current parameters.
    pub fn loss_and_grads(&self, batch: &Pair<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let tape = Tape::new();
        let bind = Binding::new(&tape, &self.store);
        let cx = Ctx::new(&tape, &bind);
        let x = tape.constant(batch.input.clone());
        let y = tape.constant(batch.target.clone());
        let pred = self.net.forward(&cx, &x)?;
        let loss = tape.psnr_loss(&pred, &y)?;
        let value = loss.value().data()[0].as_f64();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(&loss)?;
        Ok((value, bind.grads(&mut g)))
    }

    /// Run one iteration on a batch drawn from `data`.
    pub fn step(&mut self, data: &[Pair<T>]) -> Result<LogLine> {
        let mut rng = iteration_rng(self.cfg.seed, self.iter);
        let batch = sample_batch(data, &self.cfg, &mut rng)?;
        let lr = cosine_lr(self.iter, &self.cfg);
        let (loss, grads) = self.loss_and_grads(&batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            if let Some(p) = &self.diag_path {
                self.save_checkpoint(p)?;
            }
            return Err(Error::Diverged {
                iter: self.iter,
                loss,
            });
        }
        self.opt.update(&mut self.store, &grads, lr)?;
        self.iter += 1;
        Ok(LogLine {
            iter: self.iter,
            lr,
            loss,
            psnr: -loss,
        })
    }

    /// Train until `total_iters`, reporting every `log_every` iterations and
    /// checkpointing to `ckpt` when configured.
    pub fn run(
        &mut self,
        data: &[Pair<T>],
        ckpt: Option<&Path>,
        mut log: impl FnMut(&LogLine),
    ) -> Result<()> {
        while self.iter < self.cfg.total_iters {
            let line = self.step(data)?;
            if self.cfg.log_every > 0 && (line.iter % self.cfg.log_every == 0 || line.iter == 1) {
                log(&line);
            }
            if let Some(p) = ckpt {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && self.iter.is_multiple_of(every))
                    || self.iter == self.cfg.total_iters
                {
                    self.save_checkpoint(p)?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint_entries(&self) -> Vec<Entry> {
        let mut e = weights::store_entries(&self.store);
        for (id, (m, v)) in self.store.ids().zip(self.opt.m.iter().zip(&self.opt.v)) {
            let name = self.store.name(id);
            e.push((format!("optim/m/{name}"), AnyTensor::from_typed(m)));
            e.push((format!("optim/v/{name}"), AnyTensor::from_typed(v)));
        }
        e.push((
            "meta/step".into(),
            AnyTensor::F64(Tensor::scalar(self.iter as f64)),
        ));
        e.push((
            "meta/adam_step".into(),
            AnyTensor::F64(Tensor::scalar(self.opt.step as f64)),
        ));
        let halves = vec![
            (self.cfg.seed >> 32) as f64,
            (self.cfg.seed & 0xffff_ffff) as f64,
        ];
        e.push((
            "meta/seed".into(),
            AnyTensor::F64(Tensor::from_vec(&[2], halves).expect("shape")),
        ));
        e
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        weights::write_file(path, &self.checkpoint_entries())
    }

    /// Restore parameters, optimizer moments and the iteration counter.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = weights::read_file(path)?;
        weights::load_into(&mut self.store, &entries)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::MissingParam(name.to_string()))
        };
        let ids: Vec<_> = self.store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let name = self.store.name(id).to_string();
            for (kind, slot) in [("m", &mut self.opt.m[i]), ("v", &mut self.opt.v[i])] {
                let t = find(&format!("optim/{kind}/{name}"))?;
                if t.shape() != slot.shape() {
                    return Err(Error::ParamShape {
                        name: format!("optim/{kind}/{name}"),
                        expected: slot.shape().to_vec(),
                        actual: t.shape().to_vec(),
                    });
                }
                *slot = t.to_typed();
            }
        }
        let scalar = |name: &str| -> Result<f64> { Ok(find(name)?.to_typed::<f64>().data()[0]) };
        self.iter = scalar("meta/step")? as usize;
        self.opt.step = scalar("meta/adam_step")? as u64;
        let seed = find("meta/seed")?.to_typed::<f64>();
        if let [hi, lo] = seed.data() {
            self.cfg.seed = ((*hi as u64) << 32) | (*lo as u64);
        }
        Ok(())
    }
}
