use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softcorr_autodiff::{Adam, Tape, Tensor};

use super::{apply_correction, CorrectionModel};
use crate::error::{io_err, Error, Result};
use crate::mesh::TetMesh;
use crate::metric::top_surface;
use crate::pointcloud::PointCloud;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub clamp_fraction: f64,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            seed: 0,
            clamp_fraction: 0.5,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clamp_fraction > 0.0 && self.clamp_fraction <= 1.0) {
            return Err(Error::Config(format!("clamp fraction {} outside (0, 1]", self.clamp_fraction)));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("learning rate, epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

/// One supervised frame: simulated vertices, probe centre and the observed
/// cloud in the simulation frame.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub sim: Vec<Vector3<f64>>,
    pub probe: Vector3<f64>,
    pub observed: PointCloud<f64>,
}

/// Loss value and, when requested, one gradient per parameter.
pub struct LossGrad {
    pub loss: f64,
    pub grads: Option<Vec<Tensor>>,
}

/// One-directional Chamfer from the observed cloud to the corrected,
/// super-sampled top surface. Nearest neighbours are held fixed while
/// differentiating.
pub fn frame_loss(model: &CorrectionModel, mesh: &TetMesh<f64>, sample: &TrainSample, with_grad: bool) -> Result<LossGrad> {
    let input = model.encode_input(mesh, &sample.sim)?;
    let mut tape = Tape::new();
    let out = model.forward_tape(&mut tape, input, &sample.probe)?;
    let corrected = apply_correction(model, mesh, &sample.sim, tape.value(out))?;
    let surface = top_surface(mesh, &corrected)?;
    let tree = surface.cloud();
    let obs = sample.observed.points();
    if obs.is_empty() {
        return Err(Error::Argument("empty observation".into()));
    }
    let n = obs.len() as f64;
    let mut loss = 0.0;
    let mut grad_s = vec![Vector3::zeros(); surface.len()];
    for o in obs {
        let (j, d) = tree.nearest(o).expect("non-empty surface");
        loss += d;
        if d > 0.0 {
            grad_s[j] += (surface.points[j] - o) / (d * n);
        }
    }
    loss /= n;
    if !with_grad {
        return Ok(LossGrad { loss, grads: None });
    }
    let mut grad_v = vec![Vector3::zeros(); mesh.vertex_count()];
    for (g, w) in grad_s.iter().zip(&surface.weights) {
        for &(v, wt) in w {
            grad_v[v] += g * wt;
        }
    }
    let mut seed = Tensor::zeros(tape.value(out).shape());
    let cells = seed.spatial_len();
    let data = seed.data_mut();
    for (v, cell) in model.top_cells(mesh) {
        for a in 0..3 {
            data[a * cells + cell] = grad_v[v][a];
        }
    }
    let grads = tape.backward(out, seed)?.into_params(&model.params);
    Ok(LossGrad { loss, grads: Some(grads) })
}

/// Patience counter over validation losses.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Record the validation loss of `epoch`; `true` means stop.
    pub fn update(&mut self, epoch: usize, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == Some(epoch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// `(epoch, train loss, validation loss)`; epoch 0 is the untrained model.
    pub curve: Vec<(usize, f64, f64)>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("epoch,train,val\n");
        for (e, t, v) in &self.curve {
            writeln!(s, "{e},{t:.6},{v:.6}").unwrap();
        }
        std::fs::write(path, s).map_err(io_err(path))
    }
}

fn mean_loss(model: &CorrectionModel, mesh: &TetMesh<f64>, set: &[TrainSample]) -> Result<f64> {
    let mut s = 0.0;
    for x in set {
        s += frame_loss(model, mesh, x, false)?.loss;
    }
    Ok(s / set.len() as f64)
}

/// Adam over shuffled single-frame steps. The parameters of the best
/// validation epoch are restored on return.
pub fn train(model: &mut CorrectionModel, mesh: &TetMesh<f64>, train_set: &[TrainSample], val_set: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Argument("training and validation sets must be non-empty".into()));
    }
    if (cfg.clamp_fraction - model.config.clamp_fraction).abs() > 0.0 {
        return Err(Error::Config("training clamp fraction differs from the model's".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::with_lr(cfg.learning_rate);
    let mut stop = EarlyStopping::new(cfg.patience);
    let fail = |epoch: usize| move |e: Error| Error::Training { epoch, reason: e.to_string() };

    let v0 = mean_loss(model, mesh, val_set).map_err(fail(0))?;
    let t0 = mean_loss(model, mesh, train_set).map_err(fail(0))?;
    let mut curve = vec![(0, t0, v0)];
    stop.update(0, v0);
    let mut best = model.params.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let lg = frame_loss(model, mesh, &train_set[i], true).map_err(fail(epoch))?;
            if !lg.loss.is_finite() {
                return Err(Error::Training { epoch, reason: "non-finite loss".into() });
            }
            sum += lg.loss;
            adam.step(model.params.tensors_mut(), &lg.grads.expect("requested"));
        }
        let train_loss = sum / train_set.len() as f64;
        let val = mean_loss(model, mesh, val_set).map_err(fail(epoch))?;
        if !val.is_finite() {
            return Err(Error::Training { epoch, reason: "non-finite validation loss".into() });
        }
        curve.push((epoch, train_loss, val));
        log::info!("epoch {epoch}: train {train_loss:.4} mm, validation {val:.4} mm");
        let done = stop.update(epoch, val);
        if stop.improved_at(epoch) {
            best = model.params.clone();
        }
        if done {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    model.params = best;
    Ok(TrainReport {
        curve,
        best_epoch: stop.best_epoch.unwrap_or(0),
        stopped_early,
    })
}
