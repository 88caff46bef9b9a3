use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bicnet_tks::analysis::count_params;
use bicnet_tks::backbone::{Backbone, BackboneConfig, Branch, StageFeature};
use bicnet_tks::bicnet::{csp_transform, BicnetModel, ModelConfig};
use bicnet_tks::dao::{
    divergence_loss, learned_attention_map, mean_pairwise_cosine, self_attention_map, AttentionMap,
    AttentionModuleParams, DaoModules, Similarity,
};
use bicnet_tks::gradsuite::check_with_params;
use bicnet_tks::params::{assign_grads, Forward, ParamId, ParamStore};
use bicnet_tks::autodiff::Tape;
use bicnet_tks::tensor::Tensor;
use bicnet_tks::tks::{select, tks_forward, TksConfig, TksParams};
use bicnet_tks::traineval::{adam_step, AdamState};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Basic-block backbone parameter count written out layer by layer.
fn mini_closed_form() -> u64 {
    let conv = |k: u64, cin: u64, cout: u64| k * k * cin * cout;
    let bn = |c: u64| 2 * c;
    let mut total = conv(3, 3, 16) + bn(16);
    let widths = [(16, 16, 1), (16, 32, 2), (32, 64, 2), (64, 128, 2)];
    for (cin, cout, stride) in widths {
        total += conv(3, cin, cout) + bn(cout) + conv(3, cout, cout) + bn(cout);
        if cin != cout || stride != 1 {
            total += conv(1, cin, cout) + bn(cout);
        }
    }
    total
}

#[test]
fn mini_parameter_count_matches_closed_form() {
    let expected = mini_closed_form();
    let cfg = BackboneConfig::mini();
    let mut store = ParamStore::<f32>::new();
    Backbone::build(&cfg, &mut store, &mut rng(0), "backbone").unwrap();
    let built: u64 = store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.tensor.numel() as u64).sum();
    assert_eq!(built, expected);
    let mut model = ModelConfig::mini();
    model.tks.enabled = false;
    model.dao.enabled = false;
    model.csp_stages.clear();
    assert_eq!(count_params(&model).total_params, expected);
}

#[test]
fn stage_output_sizes_follow_stride_product() {
    let full = BackboneConfig::resnet50();
    assert_eq!(full.stage_output_size(4, 256, 128), (16, 8));
    assert_eq!(full.stage_output_size(4, 128, 64), (8, 4));
    let mini = BackboneConfig::mini();
    assert_eq!(mini.stage_output_size(4, 64, 32), (4, 2));
    // and by running the mini network
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::build(&mini, &mut store, &mut rng(1), "backbone").unwrap();
    let mut fw = Forward::new(&store, false);
    let x = fw.tape.constant(Tensor::normal(&[1, 3, 64, 32], 1.0, &mut rng(2)));
    let out = bb.forward_to(&mut fw, StageFeature::input(x, Branch::Detail), 4).unwrap();
    assert_eq!(fw.tape.shape(out.var), &[1, 128, 4, 2]);
}

#[test]
fn two_block_backbone_gradient_check() {
    let cfg = BackboneConfig::mini();
    for seed in 0..3 {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::build(&cfg, &mut store, &mut rng(seed), "backbone").unwrap();
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable && p.stage.is_none_or(|s| s <= 2)).map(|(id, _)| id).collect();
        let x = Tensor::normal(&[2, 3, 16, 8], 1.0, &mut rng(seed + 100));
        let r = check_with_params(&store, &ids, vec![x], false, 1e-6, Some((4, seed)), |fw, v| {
            let f = bb.forward_to(fw, StageFeature::input(v[0], Branch::Detail), 2)?;
            let s = fw.tape.mul(f.var, f.var)?;
            Ok(fw.tape.sum_all(s))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

fn reachable_backbone_params(model: &BicnetModel, store: &ParamStore<f64>, branch: Branch) -> BTreeSet<usize> {
    let mut fw = Forward::new(store, false);
    let (h, w) = match branch {
        Branch::Detail => (64, 32),
        Branch::Context => (32, 16),
    };
    let x = fw.tape.constant(Tensor::normal(&[2, 3, h, w], 1.0, &mut rng(3)));
    let f = model.backbone.forward_to(&mut fw, StageFeature::input(x, branch), 4).unwrap();
    let loss = fw.tape.sum_all(f.var);
    let grads = fw.tape.backward(loss).unwrap();
    fw.param_grads(&grads)
        .into_iter()
        .filter(|(_, g)| g.max_abs() > 0.0)
        .map(|(id, _)| id.index())
        .collect()
}

#[test]
fn both_branches_reach_the_same_parameters() {
    let mut store = ParamStore::<f64>::new();
    let model = BicnetModel::build(&ModelConfig::mini(), &mut store, &mut rng(4)).unwrap();
    let d = reachable_backbone_params(&model, &store, Branch::Detail);
    let c = reachable_backbone_params(&model, &store, Branch::Context);
    assert!(!d.is_empty());
    assert_eq!(d, c);
}

fn no_extras(mut cfg: ModelConfig) -> ModelConfig {
    cfg.dao.enabled = false;
    cfg.tks.enabled = false;
    cfg
}

#[test]
fn zero_csp_weights_give_independent_branches() {
    let cfg = no_extras(ModelConfig::mini());
    let mut store = ParamStore::<f64>::new();
    let model = BicnetModel::build(&cfg, &mut store, &mut rng(5)).unwrap();
    for &(_, id) in &model.csp.stages {
        let shape = store.get(id).tensor.shape().to_vec();
        store.get_mut(id).tensor = Tensor::zeros(&shape);
    }
    let big = Tensor::normal(&[2, 3, 64, 32], 1.0, &mut rng(6));
    let small = Tensor::normal(&[6, 3, 32, 16], 1.0, &mut rng(7));

    let mut fw = Forward::new(&store, false);
    let (b, s) = (fw.tape.constant(big.clone()), fw.tape.constant(small.clone()));
    let out = model.forward(&mut fw, b, s).unwrap();
    let joint_c = fw.tape.value(out.f_c).clone();
    let joint_d = fw.tape.value(out.f_d).clone();

    let separate = |x: Tensor<f64>, frames: usize, branch: Branch| {
        let mut fw = Forward::new(&store, false);
        let v = fw.tape.constant(x);
        let f = model.backbone.forward_to(&mut fw, StageFeature::input(v, branch), 4).unwrap();
        let g = fw.tape.mean_axes(f.var, &[2, 3]).unwrap();
        let c = fw.tape.shape(g)[1];
        let g = fw.tape.reshape(g, &[1, frames, c]).unwrap();
        let g = fw.tape.mean_axes(g, &[1]).unwrap();
        fw.tape.value(g).clone()
    };
    assert_eq!(joint_c.data(), separate(small, 6, Branch::Context).data());
    assert_eq!(joint_d.data(), separate(big, 2, Branch::Detail).data());
}

#[test]
fn consistent_frame_permutation_keeps_features() {
    let cfg = no_extras(ModelConfig::mini());
    let mut store = ParamStore::<f64>::new();
    let model = BicnetModel::build(&cfg, &mut store, &mut rng(8)).unwrap();
    let big = Tensor::normal(&[2, 3, 64, 32], 1.0, &mut rng(9));
    let small = Tensor::normal(&[6, 3, 32, 16], 1.0, &mut rng(10));
    // swap the two big frames together with their small-frame groups
    let big_sw = Tensor::stack0(&[big.index0(1), big.index0(0)]).unwrap();
    let small_sw = Tensor::stack0(&[3, 4, 5, 0, 1, 2].map(|i| small.index0(i))).unwrap();
    let run = |b: Tensor<f64>, s: Tensor<f64>| {
        let mut fw = Forward::new(&store, false);
        let (b, s) = (fw.tape.constant(b), fw.tape.constant(s));
        let out = model.forward(&mut fw, b, s).unwrap();
        (fw.tape.value(out.f_d).clone(), fw.tape.value(out.f_c).clone())
    };
    let (d0, c0) = run(big, small);
    let (d1, c1) = run(big_sw, small_sw);
    for (a, b) in d0.data().iter().chain(c0.data()).zip(d1.data().iter().chain(c1.data())) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_big_frames_give_the_frame_vector() {
    let cfg = no_extras(ModelConfig::mini());
    let mut store = ParamStore::<f64>::new();
    let model = BicnetModel::build(&cfg, &mut store, &mut rng(11)).unwrap();
    let frame = Tensor::normal(&[3, 64, 32], 1.0, &mut rng(12));
    let mut fw = Forward::new(&store, false);
    let one = fw.tape.constant(Tensor::stack0(std::slice::from_ref(&frame)).unwrap());
    let f = model.backbone.forward_to(&mut fw, StageFeature::input(one, Branch::Detail), 4).unwrap();
    let pooled = fw.tape.mean_axes(f.var, &[2, 3]).unwrap();
    let expected = fw.tape.value(pooled).clone();

    let big = fw.tape.constant(Tensor::stack0(&[frame.clone(), frame]).unwrap());
    let small = fw.tape.constant(Tensor::normal(&[6, 3, 32, 16], 1.0, &mut rng(13)));
    let out = model.forward(&mut fw, big, small).unwrap();
    let fd = fw.tape.value(out.f_d);
    assert_eq!(fd.shape(), expected.shape());
    assert_eq!(fd.data(), expected.data());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    /// With stacked identity kernels, output frame `m*alpha + j` is the pooled
    /// big frame `m` for every group `j`.
    #[test]
    fn csp_group_layout(m in 1usize..4, alpha in 1usize..4, c in 1usize..4, hh in 1usize..4, ww in 1usize..4, seed in 0u64..1000) {
        let (h, w) = (2 * hh, 2 * ww);
        let mut tape = Tape::<f64>::new();
        let x = Tensor::normal(&[m, c, h, w], 1.0, &mut rng(seed));
        let mut wd = vec![0.0; alpha * c * c];
        for j in 0..alpha {
            for i in 0..c {
                wd[(j * c + i) * c + i] = 1.0;
            }
        }
        let xv = tape.constant(x);
        let wv = tape.constant(Tensor::from_vec(&[alpha * c, c, 1, 1], wd).unwrap());
        let y = csp_transform(&mut tape, xv, wv, alpha).unwrap();
        let pooled = tape.max_pool2d(xv, 2, 2, 0).unwrap();
        let y = tape.value(y).clone();
        let p = tape.value(pooled).clone();
        prop_assert_eq!(y.shape(), &[m * alpha, c, hh, ww][..]);
        for mi in 0..m {
            for j in 0..alpha {
                let (got, want) = (y.index0(mi * alpha + j), p.index0(mi));
                prop_assert_eq!(got.data(), want.data());
            }
        }
    }

    #[test]
    fn tks_paths_are_linear_in_the_input(lambda in 0.1f64..5.0, seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let params = TksParams::register(&mut store, &mut rng(seed), "tks", 3, 2, None).unwrap();
        let x = Tensor::normal(&[2, 4, 3, 2, 1], 1.0, &mut rng(seed + 1));
        let run = |x: Tensor<f64>| {
            let mut fw = Forward::new(&store, true);
            let v = fw.tape.constant(x);
            let tr = select(&mut fw, v, &params, false).unwrap();
            let ys: Vec<Vec<f64>> = tr.paths.iter().map(|&p| fw.tape.value(p).data().to_vec()).collect();
            (ys, fw.tape.value(tr.g).data().to_vec())
        };
        let (y1, _) = run(x.clone());
        let (y2, _) = run(x.map(|v| v * lambda));
        for (a, b) in y1.iter().flatten().zip(y2.iter().flatten()) {
            prop_assert!((a * lambda - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn attention_maps_are_simplices(b in 1usize..3, c in 1usize..5, h in 1usize..4, w in 1usize..4, seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let p = AttentionModuleParams::register(&mut store, &mut rng(seed), "m", c, h * w).unwrap();
        let mut fw = Forward::new(&store, true);
        let d = fw.tape.constant(Tensor::normal(&[b, c, h, w], 2.0, &mut rng(seed + 1)));
        let a1 = self_attention_map(&mut fw.tape, d).unwrap();
        let a2 = learned_attention_map(&mut fw, d, &p).unwrap();
        for a in [a1, a2] {
            let v = fw.tape.value(a).clone();
            for row in v.data().chunks(h * w) {
                prop_assert!(row.iter().all(|&x| x > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_modules_give_loss_in_range(c in 1usize..5, hw in 2usize..8, seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let mods = DaoModules::register(&mut store, &mut rng(seed), Branch::Detail, 2, c, hw).unwrap();
        let mut fw = Forward::new(&store, true);
        let d = fw.tape.constant(Tensor::normal(&[2, c, hw, 1], 1.0, &mut rng(seed + 1)));
        let out = bicnet_tks::dao::dao_forward(&mut fw, d, 2, &mods, &Default::default()).unwrap();
        let l = fw.tape.value(out.loss).item();
        prop_assert!(l.is_finite() && (-1.0..=0.0).contains(&l), "loss {}", l);
    }
}

#[test]
fn tks_block_gradient_check() {
    let cfg = TksConfig::default();
    for seed in 0..3 {
        let mut store = ParamStore::<f64>::new();
        let params = TksParams::register(&mut store, &mut rng(seed), "tks", 8, 2, Some(2)).unwrap();
        let x = Tensor::normal(&[4, 8, 8, 4], 1.0, &mut rng(seed + 7));
        let proj = Tensor::normal(&[4, 8, 8, 4], 1.0, &mut rng(seed + 8));
        let r = check_with_params(&store, &params.param_ids(), vec![x], true, 1e-6, Some((40, seed)), |fw, v| {
            let (e, _) = tks_forward(fw, v[0], &cfg, &params)?;
            let r = fw.tape.constant(proj.clone());
            let s = fw.tape.mul(e, r)?;
            Ok(fw.tape.sum_all(s))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

fn maps_of(rows: &[Vec<f64>]) -> Vec<AttentionMap<f64>> {
    rows.iter()
        .enumerate()
        .map(|(k, r)| AttentionMap {
            values: Tensor::from_vec(&[1, r.len()], r.clone()).unwrap(),
            frame_index: k,
            branch: Branch::Detail,
        })
        .collect()
}

/// Frame `k` (1-based, k >= 2) averages its similarity to all earlier frames,
/// those averages are averaged over frames, and one is subtracted.
fn divergence_oracle(rows: &[Vec<f64>]) -> f64 {
    let m = rows.len();
    let mut total = 0.0;
    for k in 2..=m {
        let mean: f64 = (1..k).map(|l| bicnet_tks::dao::cosine(&rows[k - 1], &rows[l - 1])).sum::<f64>() / (k - 1) as f64;
        total += mean;
    }
    total / (m - 1) as f64 - 1.0
}

#[test]
fn divergence_loss_extremes() {
    let eye: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect()).collect();
    assert_eq!(divergence_loss(&maps_of(&eye), Similarity::Cosine).unwrap(), -1.0);
    let same = vec![vec![0.2, 0.3, 0.5]; 4];
    assert!(divergence_loss(&maps_of(&same), Similarity::Cosine).unwrap().abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn divergence_loss_matches_oracle(m in 2usize..6, hw in 1usize..6, seed in 0u64..10_000) {
        let mut r = rng(seed);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let t = Tensor::<f64>::uniform(&[hw], 1.0, &mut r).map(|v| v.abs() + 1e-3);
                let s = t.sum();
                t.data().iter().map(|v| v / s).collect()
            })
            .collect();
        let got = divergence_loss(&maps_of(&rows), Similarity::Cosine).unwrap();
        let want = divergence_oracle(&rows);
        prop_assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
        prop_assert!((-1.0..=0.0).contains(&got));
    }
}

#[test]
fn divergence_alone_pushes_maps_apart() {
    let (c, h, w, m) = (4, 2, 3, 3);
    let mut store = ParamStore::<f64>::new();
    let mods = DaoModules::register(&mut store, &mut rng(21), Branch::Detail, m, c, h * w).unwrap();
    let x = Tensor::normal(&[m, c, h, w], 1.0, &mut rng(22));
    let mut adam = AdamState::new();
    let mut history = Vec::new();
    for _ in 0..50 {
        let mut fw = Forward::new(&store, true);
        let v = fw.tape.constant(x.clone());
        let out = bicnet_tks::dao::dao_forward(&mut fw, v, m, &mods, &Default::default()).unwrap();
        let maps = fw.tape.value(out.maps).clone();
        let rows: Vec<&[f64]> = maps.data().chunks(h * w).collect();
        history.push(mean_pairwise_cosine(&rows).unwrap());
        let grads = fw.tape.backward(out.loss).unwrap();
        let pg = fw.param_grads(&grads);
        drop(fw);
        assert_grads_and_step(&mut store, pg, &mut adam);
    }
    for pair in history.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9, "{history:?}");
    }
    assert!(history[49] < history[0]);
}

fn assert_grads_and_step(store: &mut ParamStore<f64>, pg: Vec<(ParamId, Tensor<f64>)>, adam: &mut AdamState<f64>) {
    assign_grads(store, pg);
    adam_step(store, adam, 1e-2, 0.0);
}

#[test]
fn selection_depends_on_temporal_structure() {
    let mut store = ParamStore::<f64>::new();
    let params = TksParams::register(&mut store, &mut rng(31), "tks", 4, 2, None).unwrap();
    let base = Tensor::normal(&[1, 8, 4, 2, 1], 1.0, &mut rng(32));
    // alternating frames versus the same frames played slowly
    let slow_order = [0, 0, 1, 1, 2, 2, 3, 3];
    let fast_order = [0, 1, 2, 3, 0, 1, 2, 3];
    let frames: Vec<Tensor<f64>> = (0..8).map(|t| base.index0(0).index0(t)).collect();
    let g_of = |order: [usize; 8]| {
        let x = Tensor::stack0(&order.map(|i| frames[i].clone())).unwrap().reshape(&[1, 8, 4, 2, 1]).unwrap();
        let mut fw = Forward::new(&store, true);
        let v = fw.tape.constant(x);
        let tr = select(&mut fw, v, &params, false).unwrap();
        fw.tape.value(tr.g).data().to_vec()
    };
    let (a, b) = (g_of(slow_order), g_of(fast_order));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6, "selection ignores frame order: {diff}");
}
