//! Acceptance criteria 1-11. Each test prints one `criterion N ... PASS|FAIL`
//! line. The desk-scale training runs (7 and 8) are ignored by default; run
//! them with `cargo test -p lanetr-core --test acceptance -- --ignored --nocapture`.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use lanetr_core::autograd::{finite_difference_report, load_checkpoint, save_checkpoint, Graph, Tensor};
use lanetr_core::data::{evaluate, scaled_threshold, synth_generate, synth_scene, GenConfig, Sample, SyntheticScene};
use lanetr_core::geometry::{
    eval_image_curve, eval_tilted_curve, fit_tilted_curve, project_ground_to_image, tilt_pixel, tilt_reparameterize,
};
use lanetr_core::matching::{cost_matrix, hungarian_solve, SingularRows};
use lanetr_core::model::{image_loss, LaneModel, ModelConfig, OutputCodec, TrainConfig, Trainer, LANE_EMBEDDING};
use lanetr_core::{
    CameraModel, FitOptions, GroundCurve, GroundTruthItem, GroundTruthSet, GtLane, ImageCurveParams,
    LanePolyline, LossWeights, Prediction, PredictionSet, TiltedCurveParams,
};

fn verdict(n: u32, name: &str, pass: bool, detail: String) -> bool {
    println!("criterion {n:>2} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    pass
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn random_camera(rng: &mut ChaCha8Rng, max_pitch: f64) -> CameraModel {
    let focal = rng.random_range(150.0..1200.0);
    let pitch = if max_pitch == 0.0 {
        0.0
    } else {
        rng.random_range(-max_pitch..=max_pitch)
    };
    let height = rng.random_range(1.0..2.5);
    let aspect = rng.random_range(0.9..1.1);
    CameraModel::new(focal, pitch, height, 1.0 / focal, aspect / focal).unwrap()
}

fn random_ground(rng: &mut ChaCha8Rng) -> GroundCurve {
    GroundCurve {
        k: rng.random_range(-3e-5..3e-5),
        m: rng.random_range(-3e-3..3e-3),
        n: rng.random_range(-0.05..0.05),
        b: rng.random_range(-8.0..8.0),
    }
}

/// Tilted-plane column written term by term from the pitch substitution.
fn tilted_direct(p: &ImageCurveParams, cam: &CameraModel, v_prime: f64) -> f64 {
    let (f, phi) = (cam.focal_px, cam.pitch);
    let shifted = v_prime - f * phi.sin();
    p.kp * phi.cos().powi(2) / shifted.powi(2) + p.mp * phi.cos() / shifted + p.np + p.bp * v_prime / phi.cos()
        - p.bp * f * phi.tan()
}

/// Rows are drawn where the ground plane is imaged, at depths of 2 to 200 m.
/// Rows spread over the whole frame, including above the horizon, are
/// reported as a relative difference because `|u'|` grows without bound at
/// the pole.
#[test]
fn criterion_01_geometry_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut worst_frame_rel: f64 = 0.0;
    let mut rows = 0;
    for _ in 0..1000 {
        let cam = random_camera(&mut rng, 0.4);
        let p = project_ground_to_image(&random_ground(&mut rng), &cam);
        let g = tilt_reparameterize(&p, &cam, 0.1, 0.9).unwrap();
        let mut kept = 0;
        while kept < 100 {
            let z = rng.random_range(2.0..200.0);
            let v = tilt_pixel(cam.height / (cam.fv * z), &cam);
            if (v - g.fpp).abs() <= 1e-3 {
                continue;
            }
            let err = (tilted_direct(&p, &cam, v) - eval_tilted_curve(&g, v).unwrap()).abs();
            worst = worst.max(err);
            kept += 1;
        }
        rows += kept;
        let half = cam.focal_px * 0.5;
        for _ in 0..100 {
            let v = rng.random_range(-half..half);
            if (v - g.fpp).abs() > 1e-3 {
                let direct = tilted_direct(&p, &cam, v);
                let rel = (direct - eval_tilted_curve(&g, v).unwrap()).abs() / direct.abs().max(1.0);
                worst_frame_rel = worst_frame_rel.max(rel);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && secs < 1.0;
    assert!(verdict(
        1,
        "geometry equivalence",
        pass,
        format!("{rows} ground rows, max |diff| {worst:.3e}; whole-frame max relative diff {worst_frame_rel:.3e}; {secs:.3} s")
    ));
}

#[test]
fn criterion_02_zero_pitch_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let cam = random_camera(&mut rng, 0.0);
        let p = project_ground_to_image(&random_ground(&mut rng), &cam);
        let g = tilt_reparameterize(&p, &cam, 0.1, 0.9).unwrap();
        for _ in 0..10 {
            let v = rng.random_range(1.0..cam.focal_px);
            let err = (eval_tilted_curve(&g, v).unwrap() - eval_image_curve(&p, v).unwrap()).abs();
            worst = worst.max(err);
        }
    }
    assert!(verdict(2, "zero-pitch reduction", worst < 1e-12, format!("max |diff| {worst:.3e}")));
}

#[test]
fn criterion_03_projection_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let cam = random_camera(&mut rng, 0.0);
        let ground = random_ground(&mut rng);
        let p = project_ground_to_image(&ground, &cam);
        for _ in 0..10 {
            let z = rng.random_range(3.0..120.0);
            let x = ((ground.k * z + ground.m) * z + ground.n) * z + ground.b;
            let u = x / (cam.fu * z);
            let v = cam.height / (cam.fv * z);
            worst = worst.max((eval_image_curve(&p, v).unwrap() - u).abs());
        }
    }
    assert!(verdict(3, "projection consistency", worst < 1e-9, format!("max |diff| {worst:.3e}")));
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn total(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

fn eq7_cost(pred: &Prediction, gt: &GroundTruthItem, w: &LossWeights) -> f64 {
    match gt {
        GroundTruthItem::NonLane => -w.w1 * pred.probs[0],
        GroundTruthItem::Lane(lane) => {
            let pts = lane.polyline.points();
            let l1 = pts
                .iter()
                .map(|&(u, v)| (eval_tilted_curve(&pred.params, v).unwrap() - u).abs())
                .sum::<f64>()
                / pts.len() as f64;
            let bound = ((pred.params.alpha - lane.alpha).abs() + (pred.params.beta - lane.beta).abs()) / 2.0;
            -w.w1 * pred.probs[1] + w.w2 * l1 + w.w3 * bound
        }
    }
}

fn random_lane_instance(rng: &mut ChaCha8Rng) -> (PredictionSet, GroundTruthSet) {
    let h = 128.0;
    let n_lanes = rng.random_range(1..=5);
    let shape = (rng.random_range(-200.0..200.0), rng.random_range(-60.0..-20.0), rng.random_range(-50.0..50.0));
    let curve = |rng: &mut ChaCha8Rng| TiltedCurveParams {
        kpp: shape.0,
        fpp: shape.1,
        mpp: shape.2,
        np: 128.0,
        bpp: rng.random_range(-3.0..3.0),
        bppp: rng.random_range(-100.0..100.0),
        alpha: rng.random_range(0.05..0.3),
        beta: rng.random_range(0.7..1.0),
    };
    let lanes: Vec<GtLane> = (0..n_lanes)
        .map(|_| {
            let g = curve(rng);
            let pts = (0..12)
                .map(|r| {
                    let v = 20.0 + 9.0 * r as f64;
                    (g.eval(v).unwrap(), v)
                })
                .collect();
            GtLane::from_polyline(LanePolyline::new(pts).unwrap(), h)
        })
        .collect();
    let preds = (0..5)
        .map(|_| {
            let p = rng.random_range(0.0..1.0);
            Prediction {
                probs: [1.0 - p, p],
                params: curve(rng),
            }
        })
        .collect();
    (PredictionSet::new(preds).unwrap(), GroundTruthSet::padded(lanes, 5).unwrap())
}

#[test]
fn criterion_04_matching_oracle() {
    let start = Instant::now();
    let perms7 = permutations(7);
    assert_eq!(perms7.len(), 5040);
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut exact = 0;
    for case in 0..500 {
        let cost: Vec<Vec<f64>> = (0..7)
            .map(|_| {
                (0..7)
                    .map(|_| {
                        if case % 2 == 0 {
                            rng.random_range(-10.0..10.0)
                        } else {
                            rng.random_range(0..6) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let best = perms7.iter().map(|p| total(&cost, p)).fold(f64::INFINITY, f64::min);
        let found = total(&cost, hungarian_solve(&cost).unwrap().perm());
        exact += usize::from(found == best);
    }

    let perms5 = permutations(5);
    let w = LossWeights::default();
    let mut optimal = 0;
    for _ in 0..100 {
        let (preds, gts) = random_lane_instance(&mut rng);
        let d: Vec<Vec<f64>> = gts
            .items()
            .iter()
            .map(|gt| preds.items().iter().map(|p| eq7_cost(p, gt, &w)).collect())
            .collect();
        let cost = cost_matrix(&preds, &gts, &w, SingularRows::Reject).unwrap();
        let chosen = total(&d, hungarian_solve(&cost).unwrap().perm());
        let slack = 1e-9 * (1.0 + chosen.abs());
        optimal += usize::from(perms5.iter().all(|p| chosen <= total(&d, p) + slack));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = exact == 500 && optimal == 100 && secs < 30.0;
    assert!(verdict(
        4,
        "matching oracle",
        pass,
        format!("{exact}/500 exact 7x7 minima, {optimal}/100 lane instances optimal, {secs:.2} s")
    ));
}

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        queries: 3,
        backbone_channels: vec![4, 8, 16],
        input_h: 32,
        input_w: 64,
        ..ModelConfig::default()
    }
}

fn small_gen() -> GenConfig {
    GenConfig {
        width: 64,
        height: 32,
        first_row: 3,
        row_step: 4,
        min_points: 3,
        lanes: (2, 3),
        stroke_width: (1.5, 2.5),
        ..GenConfig::default()
    }
}

#[test]
fn criterion_05_gradient_correctness() {
    let start = Instant::now();
    let cfg = small_config();
    assert_eq!((cfg.hidden, cfg.sequence_len(), cfg.queries), (16, 32, 3));
    let scene: Sample = (&synth_generate(5, 1, &small_gen()).unwrap()[0]).into();
    let mut model = LaneModel::new(cfg.clone(), 13).unwrap();
    model.set_codec(OutputCodec::fit(64.0, 32.0, &scene.params));
    let image = model.image_tensor(&scene.image).unwrap();
    let gts = scene.gts.padded_to(3).unwrap();
    let codec = model.codec().clone();
    let w = LossWeights::default();
    let mut store = model.store().clone();
    let report = finite_difference_report(&mut store, 1e-6, 1e-4, |s| {
        let mut m = LaneModel::new(cfg.clone(), 0)?;
        *m.store_mut() = s.clone();
        m.set_codec(codec.clone());
        let il = image_loss(&m, &image, &gts, &w)?;
        Ok((il.graph, il.loss))
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let quantum = report.quantum(1e-6);
    let beyond_rounding = report
        .failures
        .iter()
        .filter(|(_, _, a, n)| (a - n).abs() > 8.0 * quantum)
        .count();
    let pass = report.max_rel_error < 1e-4 && secs < 300.0;
    assert!(verdict(
        5,
        "gradient correctness",
        pass,
        format!(
            "max rel err {:.3e} at {}[{}] (analytic {:.3e}, numeric {:.3e}); {} of {} coordinates >= 1e-4, \
             {beyond_rounding} of them beyond 8x the difference quantum {quantum:.2e} at loss {:.2}; {secs:.1} s",
            report.max_rel_error,
            report.parameter,
            report.index,
            report.analytic,
            report.numeric,
            report.failures.len(),
            report.coordinates,
            report.loss,
        )
    ));
}

#[test]
fn criterion_06_fit_round_trip() {
    let gen = GenConfig {
        lanes: (3, 3),
        ..GenConfig::default()
    };
    let scenes: Vec<SyntheticScene> = (0..)
        .map(|i| synth_scene(106, i, &gen).unwrap())
        .filter(|s| s.gts.lane_count() == 3)
        .take(100)
        .collect();
    let opts = FitOptions::new(gen.height as f64).shared(true);
    let mut worst: f64 = 0.0;
    for s in &scenes {
        let polylines: Vec<LanePolyline> = s.gts.lanes().map(|l| l.polyline.clone()).collect();
        assert_eq!(polylines.len(), 3);
        let fit = fit_tilted_curve(&polylines, &opts).unwrap();
        assert!(fit.shared.is_some());
        worst = worst.max(fit.rms_residual);
    }
    assert!(verdict(6, "fit round trip", worst < 1e-6, format!("100 scenes, max RMS {worst:.3e} px")));
}

const DESK_SEEDS: [u64; 3] = [1, 2, 3];
const DESK_TRAIN_DATA_SEED: u64 = 1;
const DESK_TEST_DATA_SEED: u64 = 1001;
const DESK_BUDGET: Duration = Duration::from_secs(3600);

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        steps: 20_000,
        batch_size: 8,
        lr: 1e-4,
        lr_decay_every: 18_000,
        lr_decay_factor: 0.1,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DeskRun {
    seed: u64,
    share_shape: bool,
    steps: u64,
    train_seconds: f64,
    accuracy: f64,
    fp_rate: f64,
    fn_rate: f64,
}

impl DeskRun {
    fn passes(&self) -> bool {
        self.accuracy >= 0.90 && self.fp_rate <= 0.10 && self.fn_rate <= 0.10 && self.train_seconds <= 3600.0
    }
}

fn desk_cache(seed: u64, share: bool) -> PathBuf {
    let tag = if share { "shared" } else { "per_lane" };
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("desk_{tag}_seed{seed}.json"))
}

/// Trains the desk model for `seed` under the wall-clock budget and evaluates
/// it on held-out scenes. Results are cached so criteria 7 and 8 share runs.
fn desk_run(seed: u64, share_shape: bool) -> DeskRun {
    let cache = desk_cache(seed, share_shape);
    if let Some(run) = std::fs::read_to_string(&cache).ok().and_then(|t| serde_json::from_str(&t).ok()) {
        return run;
    }
    let gen = GenConfig::default();
    let train: Vec<Sample> = synth_generate(DESK_TRAIN_DATA_SEED, 500, &gen).unwrap().iter().map(Sample::from).collect();
    let test: Vec<Sample> = synth_generate(DESK_TEST_DATA_SEED, 100, &gen).unwrap().iter().map(Sample::from).collect();
    let cfg = ModelConfig {
        share_shape,
        ..ModelConfig::default()
    };
    assert_eq!((cfg.hidden, cfg.queries, cfg.enc_layers, cfg.dec_layers), (32, 7, 2, 2));
    assert_eq!((cfg.input_h, cfg.input_w), (128, 256));
    let mut model = LaneModel::new(cfg, seed).unwrap();
    let labels: Vec<TiltedCurveParams> = train.iter().flat_map(|s| s.params.iter().copied()).collect();
    model.set_codec(OutputCodec::fit(gen.width as f64, gen.height as f64, &labels));
    let tc = desk_train_config();
    let steps = tc.steps;
    let mut trainer = Trainer::new(model, tc, seed).unwrap();
    let start = Instant::now();
    while trainer.steps_done() < steps && start.elapsed() < DESK_BUDGET {
        let batch = trainer.batch(&train, trainer.steps_done()).unwrap();
        let info = trainer.train_step(&batch).unwrap();
        if info.step % 500 == 0 {
            eprintln!(
                "desk seed {seed} shared {share_shape}: step {} loss {:.2} at {:.0} s",
                info.step,
                info.loss,
                start.elapsed().as_secs_f64()
            );
        }
    }
    let train_seconds = start.elapsed().as_secs_f64();
    let preds: Vec<PredictionSet> = test.iter().map(|s| trainer.model.predict(&s.image).unwrap()).collect();
    let gts: Vec<GroundTruthSet> = test.iter().map(|s| s.gts.clone()).collect();
    let r = evaluate(&preds, &gts, gen.height as f64, scaled_threshold(gen.height as f64)).unwrap();
    let run = DeskRun {
        seed,
        share_shape,
        steps: trainer.steps_done(),
        train_seconds,
        accuracy: r.accuracy,
        fp_rate: r.fp_rate,
        fn_rate: r.fn_rate,
    };
    std::fs::write(&cache, serde_json::to_string_pretty(&run).unwrap()).unwrap();
    run
}

fn describe(runs: &[DeskRun]) -> String {
    runs.iter()
        .map(|r| {
            format!(
                "seed {}: acc {:.4} fp {:.4} fn {:.4} after {} steps in {:.0} s",
                r.seed, r.accuracy, r.fp_rate, r.fn_rate, r.steps, r.train_seconds
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[test]
#[ignore = "desk-scale training, about one hour per seed"]
fn criterion_07_desk_training() {
    let runs: Vec<DeskRun> = DESK_SEEDS.iter().map(|&s| desk_run(s, true)).collect();
    let passing = runs.iter().filter(|r| r.passes()).count();
    assert!(verdict(
        7,
        "desk training",
        passing >= 2,
        format!("{passing}/3 seeds pass; {}", describe(&runs))
    ));
}

#[test]
#[ignore = "desk-scale training, about one hour per seed and variant"]
fn criterion_08_shape_ablation() {
    let shared: Vec<DeskRun> = DESK_SEEDS.iter().map(|&s| desk_run(s, true)).collect();
    let per_lane: Vec<DeskRun> = DESK_SEEDS.iter().map(|&s| desk_run(s, false)).collect();
    let mean = |runs: &[DeskRun]| runs.iter().map(|r| r.accuracy).sum::<f64>() / runs.len() as f64;
    let (a, b) = (mean(&shared), mean(&per_lane));
    assert!(verdict(
        8,
        "shape-consistency ablation",
        a >= b - 0.01,
        format!("mean accuracy shared {a:.4} vs per-lane {b:.4}; per-lane runs: {}", describe(&per_lane))
    ));
}

fn seeded_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, cfg.input_h, cfg.input_w], |_| rng.random_range(-1.0..1.0))
}

fn head_outputs(model: &LaneModel, image: &Tensor) -> Vec<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, image).unwrap();
    out.heads
        .iter()
        .map(|h| (g.value(h.probs).clone(), g.value(h.params).clone()))
        .collect()
}

#[test]
fn criterion_09_model_invariants() {
    let cfg = ModelConfig::default();
    let image = seeded_image(&cfg, 109);
    let n = cfg.queries;

    let mut model = LaneModel::new(cfg.clone(), 109).unwrap();
    let base = head_outputs(&model, &image);
    let perm: Vec<usize> = (0..n).map(|i| (i * 3 + 2) % n).collect();
    let permuted = model.store().get(LANE_EMBEDDING).unwrap().permute_rows(&perm);
    *model.store_mut().get_mut(LANE_EMBEDDING).unwrap() = permuted;
    let moved = head_outputs(&model, &image);
    let slot_equivariant = base.iter().zip(&moved).all(|((pa, qa), (pb, qb))| {
        bits(&pa.permute_rows(&perm)) == bits(pb) && bits(&qa.permute_rows(&perm)) == bits(qb)
    });

    let model = LaneModel::new(cfg.clone(), 110).unwrap();
    let len = cfg.sequence_len();
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let tokens = Tensor::from_fn(&[len, cfg.hidden], |_| rng.random_range(-1.0..1.0));
    let order: Vec<usize> = (0..len).map(|i| (i * 37 + 11) % len).collect();
    let encode = |s: &Tensor| {
        let mut g = Graph::new();
        let x = g.input(s.clone());
        let pos = g.input(Tensor::zeros(&[len, cfg.hidden]));
        let out = model.encoder_forward(&mut g, x, pos).unwrap();
        g.value(out.memory).clone()
    };
    let encoder_equivariant = bits(&encode(&tokens).permute_rows(&order)) == bits(&encode(&tokens.permute_rows(&order)));

    let shared = LaneModel::new(cfg.clone(), 112).unwrap();
    let mut g = Graph::new();
    let out = shared.forward(&mut g, &image).unwrap();
    let broadcast = out.heads.iter().all(|h| {
        let p = g.value(h.params);
        (0..4).all(|c| (1..n).all(|r| p.at2(r, c).to_bits() == p.at2(0, c).to_bits()))
    });
    let mut worst_row: f64 = 0.0;
    let mut maps = 0;
    for &v in out
        .encoder
        .attention
        .iter()
        .chain(&out.decoder.self_attention)
        .chain(&out.decoder.cross_attention)
    {
        let a = g.attention_map(v).unwrap();
        let nk = a.shape()[2];
        for row in a.data().chunks(nk) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        maps += 1;
    }
    let pass = slot_equivariant && encoder_equivariant && broadcast && worst_row < 1e-9;
    assert!(verdict(
        9,
        "model invariants",
        pass,
        format!(
            "slot equivariance {slot_equivariant}, encoder equivariance {encoder_equivariant}, \
             shared broadcast {broadcast}, {maps} attention maps with max |row sum - 1| {worst_row:.2e}"
        )
    ));
}

#[test]
fn criterion_10_metric_sanity() {
    let gen = GenConfig::default();
    let h = gen.height as f64;
    let scenes: Vec<Sample> = synth_generate(110, 100, &gen).unwrap().iter().map(Sample::from).collect();
    let gts: Vec<GroundTruthSet> = scenes.iter().map(|s| s.gts.clone()).collect();
    let exact: Vec<PredictionSet> = scenes
        .iter()
        .map(|s| {
            let items = s.params.iter().map(|&params| Prediction { probs: [0.0, 1.0], params }).collect();
            PredictionSet::new(items).unwrap()
        })
        .collect();
    let own = evaluate(&exact, &gts, h, scaled_threshold(h)).unwrap();
    let self_eval = own.accuracy == 1.0 && own.fp_rate == 0.0 && own.fn_rate == 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(210);
    let noisy: Vec<PredictionSet> = scenes
        .iter()
        .map(|s| {
            let items = s
                .params
                .iter()
                .map(|&params| Prediction {
                    probs: [0.0, 1.0],
                    params: TiltedCurveParams {
                        bppp: params.bppp + rng.random_range(-15.0..15.0),
                        ..params
                    },
                })
                .collect();
            PredictionSet::new(items).unwrap()
        })
        .collect();
    let sweep: Vec<(f64, f64, f64)> = [1.0, 5.0, 10.0, 20.0]
        .iter()
        .map(|&t| {
            let r = evaluate(&noisy, &gts, h, t).unwrap();
            (r.accuracy, r.fp_rate, r.fn_rate)
        })
        .collect();
    let monotone = sweep
        .windows(2)
        .all(|w| w[1].0 >= w[0].0 && w[1].1 <= w[0].1 && w[1].2 <= w[0].2);
    let pass = self_eval && monotone;
    assert!(verdict(
        10,
        "metric sanity",
        pass,
        format!(
            "self-evaluation acc {} fp {} fn {}; accuracy over thresholds 1/5/10/20 px: {}",
            own.accuracy,
            own.fp_rate,
            own.fn_rate,
            sweep.iter().map(|s| format!("{:.4}", s.0)).collect::<Vec<_>>().join("/")
        )
    ));
}

#[test]
fn criterion_11_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.ckpt");
    let cfg = ModelConfig::default();
    let gen = GenConfig::default();
    let labels: Vec<TiltedCurveParams> = synth_generate(111, 20, &gen)
        .unwrap()
        .iter()
        .flat_map(|s| s.params.clone())
        .collect();
    let mut model = LaneModel::new(cfg.clone(), 111).unwrap();
    model.set_codec(OutputCodec::fit(gen.width as f64, gen.height as f64, &labels));
    let inputs: Vec<Tensor> = (0..10).map(|i| seeded_image(&cfg, 1100 + i)).collect();
    let before: Vec<_> = inputs.iter().map(|x| head_outputs(&model, x)).collect();
    save_checkpoint(&path, &model.to_checkpoint()).unwrap();
    let loaded = LaneModel::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
    let identical = inputs
        .iter()
        .zip(&before)
        .filter(|(x, b)| {
            head_outputs(&loaded, x)
                .iter()
                .zip(b.iter())
                .all(|((pa, qa), (pb, qb))| bits(pa) == bits(pb) && bits(qa) == bits(qb))
        })
        .count();
    assert!(verdict(11, "checkpoint round trip", identical == 10, format!("{identical}/10 inputs bit-identical")));
}
