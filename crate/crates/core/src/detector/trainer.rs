//! Deterministic toy trainer: Adam with cosine learning-rate decay over
//! generated scenes, emitting a checkpoint directory (config, parameter
//! blobs, metrics trace).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::pipeline::{backward_loss, forward_loss, DetectorParams, LossParts};
use crate::detector::scene::generate_scene;
use crate::detector::targets::build_targets;
use crate::detector::RunConfig;
use crate::error::{Error, Result};
use crate::losses::FocalConfig;
use crate::rcd::checkpoint;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam state per parameter, in `named_params` order.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    fn new(params: &DetectorParams) -> Adam {
        let sizes: Vec<usize> = params.named_params().iter().map(|(_, p)| p.len()).collect();
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut DetectorParams, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, (_, p)) in params.named_params_mut().into_iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let grads = p.grad.data().to_vec();
            let values = p.value.data_mut();
            for j in 0..values.len() {
                let g = grads[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                values[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub parts: LossParts,
    pub nominal_width: f64,
    pub gate_scale: f64,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub trace: Vec<TraceRow>,
    pub final_nominal_width: f64,
    pub final_gate_scale: f64,
    pub params: DetectorParams,
}

/// Scene seed for a training iteration; pure in (seed, iteration, index).
pub fn scene_seed(base: u64, iteration: usize, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(iteration as u64)
        .wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add(index as u64)
}

/// Run the toy optimization and write the checkpoint into `out_dir`.
pub fn train_toy(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = DetectorParams::init(&cfg.net, &cfg.bins, &mut rng);
    let mut adam = Adam::new(&params);
    let focal = FocalConfig::default();
    let total_iters = cfg.trainer.iterations;
    let mut trace = Vec::with_capacity(total_iters);
    let mut last_good: Option<DetectorParams> = None;

    for iter in 0..total_iters {
        let lr = cfg.trainer.learning_rate
            * 0.5
            * (1.0 + (std::f64::consts::PI * iter as f64 / total_iters.max(1) as f64).cos());
        params.zero_grads();
        let mut acc = LossParts::default();
        let scenes = cfg.trainer.scenes_per_iteration.max(1);
        let mut failed = false;
        for s in 0..scenes {
            let scene = generate_scene(&cfg.scene, scene_seed(cfg.seed, iter, s));
            let targets = build_targets(&scene, &cfg.bins);
            let sub_seed = scene_seed(cfg.seed ^ 0x5eed_5eed, iter, s);
            match forward_loss(&scene, &targets, &params, &focal, &cfg.bins, &cfg.trainer, sub_seed) {
                Ok((parts, state)) => {
                    let inv = 1.0 / scenes as f64;
                    backward_loss([inv; 4], &scene, &state, &mut params, &cfg.bins)?;
                    acc.rpn_cls += parts.rpn_cls * inv;
                    acc.rpn_box += parts.rpn_box * inv;
                    acc.rcnn_cls += parts.rcnn_cls * inv;
                    acc.rcnn_reg += parts.rcnn_reg * inv;
                }
                Err(Error::NonFinite { .. }) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failed || !acc.total().is_finite() {
            // abort with the last good checkpoint
            if let Some(good) = last_good {
                write_checkpoint(cfg, &good, &trace, out_dir)?;
            }
            return Err(Error::Diverged { iteration: iter });
        }
        adam.update(&mut params, lr);
        last_good = Some(params.clone());
        trace.push(TraceRow {
            iteration: iter,
            parts: acc,
            nominal_width: params.rpn.stem.nominal_width(),
            gate_scale: params.rpn.stem.gate_scale(),
        });
    }

    write_checkpoint(cfg, &params, &trace, out_dir)?;
    Ok(TrainSummary {
        final_nominal_width: params.rpn.stem.nominal_width(),
        final_gate_scale: params.rpn.stem.gate_scale(),
        trace,
        params,
    })
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,rpn_cls,rpn_box,rcnn_cls,rcnn_reg,nominal_width,gate_scale\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.iteration,
            row.parts.rpn_cls,
            row.parts.rpn_box,
            row.parts.rcnn_cls,
            row.parts.rcnn_reg,
            row.nominal_width,
            row.gate_scale
        ));
    }
    out
}

/// Checkpoint directory layout: `config.json`, `trace.csv`, plus the
/// manifest-and-blobs parameter format.
pub fn write_checkpoint(
    cfg: &RunConfig,
    params: &DetectorParams,
    trace: &[TraceRow],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(0, e))?;
    let config_json = serde_json::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("config.json"), config_json).map_err(|e| Error::io(0, e))?;
    std::fs::write(dir.join("trace.csv"), trace_csv(trace)).map_err(|e| Error::io(0, e))?;
    let named = params.named_params();
    let entries: Vec<(String, &crate::numerics::Tensor)> =
        named.iter().map(|(n, p)| (n.clone(), &p.value)).collect();
    checkpoint::save_params(
        dir,
        &entries,
        params.rpn.stem.n_samples(),
        params.rpn.stem.nominal_width(),
        params.rpn.stem.gate_scale(),
    )
}

/// Load a checkpoint directory: the stored config plus parameters.
pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, DetectorParams)> {
    let text = std::fs::read_to_string(dir.join("config.json")).map_err(|e| Error::io(0, e))?;
    let cfg = RunConfig::from_json(&text)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = DetectorParams::init(&cfg.net, &cfg.bins, &mut rng);
    let (_, stored) = checkpoint::load_params(dir)?;
    let mut by_name: std::collections::BTreeMap<String, crate::numerics::Tensor> =
        stored.into_iter().collect();
    for (name, p) in params.named_params_mut() {
        let tensor = by_name
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {}", name)))?;
        if tensor.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "parameter {} has shape {:?}, expected {:?}",
                name,
                tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = tensor;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!("checkpoint has unknown parameter {}", extra)));
    }
    Ok((cfg, params))
}
