//! Central-difference check of the student's analytic gradients.

use bootdistill::masking::{sample_mask, PatchMask};
use bootdistill::model::{init_model, student_backward, student_forward, ModelConfig, StudentPass, TokenBatch};
use bootdistill::objective::{mkd_loss_batch, DistillConfig};
use bootdistill::rng::stream;
use bootdistill::ParameterStore;
use ndarray::Array2;
use rand::Rng;

fn forward(params: &ParameterStore, cfg: &ModelConfig, full: &TokenBatch, masks: &[PatchMask]) -> StudentPass {
    // A fixed stream, so every evaluation drops the same branches.
    let mut dp = stream(99, &[]);
    let rng = (cfg.drop_path_rate > 0.0).then_some(&mut dp);
    student_forward(params, cfg, full, masks, rng).unwrap()
}

fn loss(params: &ParameterStore, cfg: &ModelConfig, full: &TokenBatch, masks: &[PatchMask], target: &Array2<f64>, d: &DistillConfig) -> f64 {
    let pass = forward(params, cfg, full, masks);
    mkd_loss_batch(pass.prediction.view(), target.view(), masks, d).unwrap().value
}

/// Key biases have an identically zero gradient (softmax is shift invariant),
/// where central differences return pure roundoff of order 1e-11. The floor
/// keeps those from dominating the relative error.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Largest relative error `|a − n| / max(|a|, |n|, GRAD_FLOOR)` over all
/// scalars.
pub fn max_relative_error(cfg: &ModelConfig, d: &DistillConfig, seed: u64) -> f64 {
    let mut params = init_model(cfg, seed).unwrap();
    // Perturb gains, biases and tokens away from their symmetric init.
    let mut r = stream(seed, &[42]);
    for (_, t) in params.iter_mut() {
        t.mapv_inplace(|x| x + r.gen_range(-0.1..0.1));
    }
    let n = cfg.n_patches();
    let batch = 2;
    let full = TokenBatch {
        rows: Array2::from_shape_fn((batch * n, cfg.patch_dim()), |_| r.gen_range(-1.0..1.0)),
        position_ids: (0..batch).flat_map(|_| 0..n).collect(),
        seq_len: n,
    };
    let masks: Vec<_> = (0..batch).map(|_| sample_mask(n, 0.75, &mut r).unwrap()).collect();
    let target = Array2::from_shape_fn((batch * n, cfg.projection_dim), |_| r.gen_range(-1.5..1.5));

    let pass = forward(&params, cfg, &full, &masks);
    let out = mkd_loss_batch(pass.prediction.view(), target.view(), &masks, d).unwrap();
    let grads = student_backward(&params, cfg, &pass, out.grad).unwrap();
    grads.check_compatible(&params).unwrap();

    let h = 1e-5;
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut worst = 0.0f64;
    for name in names {
        let len = params.get(&name).unwrap().len();
        for i in 0..len {
            let orig = params.get(&name).unwrap().as_slice().unwrap()[i];
            params.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = orig + h;
            let up = loss(&params, cfg, &full, &masks, &target, d);
            params.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = orig - h;
            let down = loss(&params, cfg, &full, &masks, &target, d);
            params.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(&name).unwrap().as_slice().unwrap()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

