//! Toy training on generated scene pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::datakit::{augment_with_yaw, synth_scene_pair, RegistrationPair, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{training_loss, Model};
use crate::numerics::{Graph, Matrix, Parameterized};

pub const LOG_HEADER: &str = "step,L_s1,L_s2,L_c,L_f,total,lr";

/// Adaptive-moment optimiser over named tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One update of every parameter of `model` that has a gradient.
    pub fn step<P: Parameterized>(&mut self, model: &mut P, grads: &BTreeMap<String, Matrix>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let moments = &mut self.moments;
        model.visit_params_mut("", &mut |name, w| {
            let Some(g) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Matrix::zeros(w.rows(), w.cols()), Matrix::zeros(w.rows(), w.cols())));
            let (ws, gs) = (w.as_mut_slice(), g.as_slice());
            for (k, (mk, vk)) in m.as_mut_slice().iter_mut().zip(v.as_mut_slice()).enumerate() {
                *mk = b1 * *mk + (1.0 - b1) * gs[k];
                *vk = b2 * *vk + (1.0 - b2) * gs[k] * gs[k];
                ws[k] -= lr * (*mk / c1) / ((*vk / c2).sqrt() + eps);
            }
        });
    }
}

/// Rescales all gradients together so their joint norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.step, l.l_s1, l.l_s2, l.l_c, l.l_f, l.total, r.lr);
    }
    s
}

/// Mean total loss of each epoch that logged at least one step.
pub fn epoch_means(rows: &[LogRow]) -> Vec<f64> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.losses.total;
                *n += 1;
            }
            _ => out.push((r.epoch, r.losses.total, 1)),
        }
    }
    out.into_iter().map(|(_, s, n)| s / n as f64).collect()
}

/// Scene-pair seeds for training, drawn from the run seed.
pub fn training_seeds(seed: u64, scenes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    (0..scenes).map(|_| rng.random()).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    /// Steps skipped because a pair produced no usable supervision.
    pub skipped: usize,
}

/// Trains from a seeded initialisation. `on_epoch` sees the model after
/// every completed epoch; a non-finite loss or gradient stops the run with
/// a training failure, leaving the last `on_epoch` state as the good one.
pub fn train(
    cfg: &Config,
    scenes: usize,
    epochs: usize,
    synth: &SynthConfig,
    mut on_epoch: impl FnMut(usize, &Model, &[LogRow]) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes == 0 || epochs == 0 {
        return Err(Error::invalid("training needs at least one scene and one epoch"));
    }
    let model_cfg = cfg.model_config();
    let loss_cfg = cfg.loss_config();
    let pairs: Vec<RegistrationPair> = training_seeds(cfg.seed, scenes)
        .into_iter()
        .map(|s| synth_scene_pair(s, synth))
        .collect::<Result<_>>()?;
    let mut model = Model::random(model_cfg.arch, cfg.seed)?;
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = Vec::new();
    let mut skipped = 0;
    let mut step = 0;
    on_epoch(0, &model, &log)?;
    for epoch in 0..epochs {
        let lr = cfg.learning_rate(epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        for i in order {
            let pair = augment_with_yaw(&pairs[i], rng.random(), cfg.augment_yaw_deg.to_radians());
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let (total, losses, _) = match training_loss(&mut g, &bound, &pair, &model_cfg, &loss_cfg) {
                Ok(r) => r,
                Err(Error::InsufficientData(_) | Error::InvalidSupervision(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !losses.is_finite() {
                return Err(Error::TrainingFailure(format!("non-finite loss at step {step} (epoch {epoch})")));
            }
            let mut grads = g.param_grads(&g.backward(total)?);
            if grads.values().any(|m| !m.is_finite()) {
                return Err(Error::TrainingFailure(format!("non-finite gradient at step {step} (epoch {epoch})")));
            }
            clip_gradients(&mut grads, cfg.clip_norm);
            adam.step(&mut model, &grads, lr);
            log.push(LogRow { step, epoch, losses, lr });
            step += 1;
        }
        on_epoch(epoch + 1, &model, &log)?;
    }
    Ok(TrainOutcome { model, log, skipped })
}

/// Trains and keeps `weights` and `log_path` current after every epoch.
pub fn train_to_files(
    cfg: &Config,
    scenes: usize,
    epochs: usize,
    synth: &SynthConfig,
    weights: &Path,
    log_path: &Path,
) -> Result<TrainOutcome> {
    let write_log = |rows: &[LogRow]| std::fs::write(log_path, format_log(rows)).map_err(|e| Error::io(log_path, e));
    let mut last_log = Vec::new();
    let result = train(cfg, scenes, epochs, synth, |_, model, rows| {
        model.save(weights)?;
        last_log = rows.to_vec();
        write_log(rows)
    });
    if let Err(Error::TrainingFailure(_)) = &result {
        write_log(&last_log)?;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        w: Matrix,
    }

    impl Parameterized for Quadratic {
        fn visit_params(&self, prefix: &str, f: &mut crate::numerics::params::ParamVisitor<'_>) {
            f(&format!("{prefix}w"), &self.w);
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut crate::numerics::params::ParamVisitorMut<'_>) {
            f(&format!("{prefix}w"), &mut self.w);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_the_gradient_sign() {
        let mut q = Quadratic { w: Matrix::from_rows(&[[1.0, -2.0, 0.5]]) };
        let grads = BTreeMap::from([("w".to_string(), Matrix::from_rows(&[[3.0, -0.01, 0.0]]))]);
        Adam::default().step(&mut q, &grads, 0.1);
        let w = q.w.as_slice();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-5);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut q = Quadratic { w: Matrix::from_rows(&[[4.0, -3.0]]) };
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let grads = BTreeMap::from([("w".to_string(), q.w.scale(2.0))]);
            adam.step(&mut q, &grads, 0.05);
        }
        assert!(q.w.norm() < 1e-2, "{:?}", q.w);
    }

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut grads = BTreeMap::from([
            ("a".to_string(), Matrix::from_rows(&[[30.0, 0.0]])),
            ("b".to_string(), Matrix::from_rows(&[[0.0, 40.0]])),
        ]);
        assert_eq!(clip_gradients(&mut grads, 10.0), 50.0);
        assert!((grads["a"].get(0, 0) - 6.0).abs() < 1e-12);
        assert!((grads["b"].get(0, 1) - 8.0).abs() < 1e-12);
        let before = grads.clone();
        clip_gradients(&mut grads, 100.0);
        assert_eq!(grads, before);
    }

    #[test]
    fn epoch_means_group_consecutive_rows() {
        let row = |step, epoch, total| LogRow {
            step,
            epoch,
            losses: LossBreakdown::new(0.0, 0.0, 0.0, total),
            lr: 1e-4,
        };
        let rows = [row(0, 0, 2.0), row(1, 0, 4.0), row(2, 1, 1.0)];
        assert_eq!(epoch_means(&rows), vec![3.0, 1.0]);
        let text = format_log(&rows);
        assert!(text.starts_with("step,L_s1,L_s2,L_c,L_f,total,lr\n0,0,0,0,2,2,0.0001\n"));
    }
}
