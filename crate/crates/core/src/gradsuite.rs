//! Registered finite-difference checks for the differentiable blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_sampled, GradCheckReport, Tape, Var};
use crate::bicnet::{csp_transform, BicnetModel, ModelConfig};
use crate::dao::{dao_forward, DaoConfig, DaoModules};
use crate::backbone::Branch;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tks::{tks_forward, TksConfig, TksParams};
use crate::traineval::total_loss;

pub const TOLERANCE: f64 = 1e-4;
pub const EPSILON: f64 = 1e-6;
/// Larger step for the deep end-to-end check, where round-off in the loss
/// dominates the central difference at `EPSILON`.
pub const EPSILON_END_TO_END: f64 = 1e-5;

pub const BLOCKS: &[&str] = &[
    "conv2d",
    "temporal_conv1d_d1",
    "temporal_conv1d_d2",
    "temporal_conv1d_d3",
    "softmax",
    "csp_transform",
    "dao",
    "tks",
    "bicnet_tks_mini",
];

#[derive(Clone, Debug, Serialize)]
pub struct BlockResult {
    pub block: String,
    pub seed: u64,
    pub passed: bool,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::normal(shape, 1.0, rng)
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let r = tape.constant(randn(tape.shape(y), &mut rng));
    let p = tape.mul(y, r)?;
    Ok(tape.sum_all(p))
}

/// Checks `f` with respect to `inputs` and the listed parameters.
pub fn check_with_params<F>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    inputs: Vec<Tensor<f64>>,
    train: bool,
    epsilon: f64,
    max_coords: Option<(usize, u64)>,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Forward<'_, f64>, &[Var]) -> Result<Var>,
{
    let n = inputs.len();
    let mut points = inputs;
    points.extend(params.iter().map(|&id| store.get(id).tensor.clone()));
    grad_check_sampled(
        |tape, vars| {
            let mut fw = Forward::with_tape(std::mem::take(tape), store, train);
            for (&id, &v) in params.iter().zip(&vars[n..]) {
                fw.bind(id, v);
            }
            let out = f(&mut fw, &vars[..n]);
            *tape = fw.tape;
            out
        },
        &points,
        epsilon,
        max_coords,
    )
}

/// Small end-to-end configuration used by the `bicnet_tks_mini` check.
pub fn end_to_end_config() -> ModelConfig {
    let mut cfg = ModelConfig::mini();
    cfg.segment_len = 4;
    cfg.alpha = 1;
    cfg.big_res = [32, 16];
    cfg.csp_stages = vec![1, 2];
    cfg.dao.stage = 2;
    cfg.tks.grid_h = 2;
    cfg.tks.grid_w = 1;
    cfg
}

pub fn run_block(block: &str, seed: u64) -> Result<BlockResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = match block {
        "conv2d" => {
            let (stride, padding) = [(1, 1), (2, 1), (1, 0)][rng.gen_range(0..3)];
            let x = randn(&[2, 3, 6, 5], &mut rng);
            let w = randn(&[4, 3, 3, 3], &mut rng);
            grad_check_sampled(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], stride, padding)?;
                    project(t, y, seed)
                },
                &[x, w],
                EPSILON,
                None,
            )?
        }
        b if b.starts_with("temporal_conv1d_d") => {
            let d: usize = b["temporal_conv1d_d".len()..]
                .parse()
                .map_err(|_| Error::Usage(format!("unknown block {block}")))?;
            let x = randn(&[2, 7, 3, 2, 2], &mut rng);
            let w = randn(&[4, 3, 3], &mut rng);
            grad_check_sampled(
                |t, v| {
                    let y = t.temporal_conv1d(v[0], v[1], d)?;
                    project(t, y, seed)
                },
                &[x, w],
                EPSILON,
                None,
            )?
        }
        "softmax" => {
            let x = randn(&[3, 5, 2], &mut rng);
            let axis = rng.gen_range(0..3);
            grad_check_sampled(
                |t, v| {
                    let y = t.softmax(v[0], axis)?;
                    project(t, y, seed)
                },
                &[x],
                EPSILON,
                None,
            )?
        }
        "csp_transform" => {
            let alpha = rng.gen_range(1..=3);
            let c = 3;
            let x = randn(&[2, c, 4, 6], &mut rng);
            let w = randn(&[alpha * c, c, 1, 1], &mut rng);
            grad_check_sampled(
                |t, v| {
                    let y = csp_transform(t, v[0], v[1], alpha)?;
                    project(t, y, seed)
                },
                &[x, w],
                EPSILON,
                None,
            )?
        }
        "dao" => {
            let (b, m, c, h, w) = (2, 3, 4, 2, 3);
            let mut store = ParamStore::new();
            let modules = DaoModules::register(&mut store, &mut rng, Branch::Detail, m, c, h * w)?;
            let ids: Vec<ParamId> = modules.modules.iter().flat_map(|p| p.param_ids()).collect();
            let x = randn(&[b * m, c, h, w], &mut rng);
            let cfg = DaoConfig::default();
            check_with_params(&store, &ids, vec![x], true, EPSILON, None, |fw, v| {
                let out = dao_forward(fw, v[0], m, &modules, &cfg)?;
                let p = project(&mut fw.tape, out.features, seed)?;
                fw.tape.add(p, out.loss)
            })?
        }
        "tks" => {
            let (b, t, c) = (2, 4, 3);
            let cfg = TksConfig {
                grid_h: 2,
                grid_w: 1,
                ..TksConfig::default()
            };
            let mut store = ParamStore::new();
            let params = TksParams::register(&mut store, &mut rng, "tks", c, cfg.k, Some(2))?;
            let x = randn(&[b, t, c, 4, 2], &mut rng);
            check_with_params(&store, &params.param_ids(), vec![x], true, EPSILON, None, |fw, v| {
                let (e, _) = tks_forward(fw, v[0], &cfg, &params)?;
                project(&mut fw.tape, e, seed)
            })?
        }
        "bicnet_tks_mini" => {
            let cfg = end_to_end_config();
            let mut store = ParamStore::new();
            let model = BicnetModel::build(&cfg, &mut store, &mut rng)?;
            let classes = 2;
            let cls_w = store.add(
                "classifier.weight",
                Tensor::normal(&[classes, model.out_channels()], 0.1, &mut rng),
                true,
                None,
            )?;
            let cls_b = store.add("classifier.bias", Tensor::zeros(&[classes]), true, None)?;
            let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
            let segs = 4;
            let [h, w] = cfg.big_res;
            let big = randn(&[segs * cfg.big_frames(), 3, h, w], &mut rng);
            let small = randn(&[segs * cfg.small_frames(), 3, h / 2, w / 2], &mut rng);
            let labels = [0, 0, 1, 1];
            check_with_params(&store, &ids, vec![big, small], false, EPSILON_END_TO_END, Some((3, seed)), |fw, v| {
                let out = model.forward(fw, v[0], v[1])?;
                let wv = fw.param(cls_w);
                let bv = fw.param(cls_b);
                let logits = fw.tape.linear(out.feature, wv, Some(bv))?;
                let terms = total_loss(&mut fw.tape, out.feature, logits, &labels, out.dao_loss, 1.0, 0.3)?;
                Ok(terms.total)
            })?
        }
        _ => return Err(Error::Usage(format!("unknown gradient check block `{block}`"))),
    };
    Ok(BlockResult {
        block: block.to_string(),
        seed,
        passed: report.max_rel_error < TOLERANCE,
        report,
    })
}
