use super::*;
use crate::bevgrid::rasterize;
use crate::geom::{nms_indices, rotated_iou};
use crate::synthworld::{generate_scene, LidarSpec, SceneSpec};
use crate::tensor::ClsTarget;
use proptest::prelude::*;
use rand::Rng;

fn tiny() -> DetectorConfig {
    DetectorConfig {
        blocks: [1, 1, 1, 1],
        filters: [8, 8, 12, 12],
        header_layers: 1,
        header_filters: 12,
        ..DetectorConfig::default()
    }
}

fn small_bev() -> BevConfig {
    BevConfig::new((0.0, 25.6), (-12.8, 12.8), (-2.5, 1.5), 0.4, 0.4, 0.5).unwrap()
}

#[test]
fn kitti_shape_and_road_channel() {
    let cfg = DetectorConfig::default();
    let spec = build_detector(&cfg, 23).unwrap();
    assert_eq!(spec.infer_shape(23, 800, 704).unwrap(), (7, 200, 176));
    let spec = build_detector(&cfg, 24).unwrap();
    assert_eq!(spec.infer_shape(24, 800, 704).unwrap(), (7, 200, 176));
    let mt = DetectorConfig {
        road_fusion: RoadFusion::MultiTask,
        ..cfg.clone()
    };
    assert_eq!(build_detector(&mt, 23).unwrap().infer_shape(23, 800, 704).unwrap(), (8, 200, 176));
}

#[test]
fn kitti_bev_output_matches_grid() {
    let bev = BevConfig::kitti();
    assert_eq!((bev.channels(), bev.rows(), bev.cols()), (23, 704, 800));
    assert_eq!(bev.output_dims(), (176, 200));
}

#[test]
fn parameter_count_is_analytic() {
    for cfg in [
        DetectorConfig::default(),
        tiny(),
        DetectorConfig {
            road_fusion: RoadFusion::MultiTask,
            ..tiny()
        },
    ] {
        for cin in [23, 24] {
            let net: Network<f32> = new_detector(&cfg, cin, 0).unwrap();
            assert_eq!(net.num_learnable(), analytic_param_count(&cfg, cin));
        }
    }
    // hand count of the full-size network with 23 input channels
    let block = |cin: usize, c: usize, n: usize| (cin * c * 9 + 2 * c) + (n - 1) * (c * c * 9 + 2 * c);
    let backbone = block(23, 32, 2) + block(32, 64, 2) + block(64, 128, 3) + block(128, 256, 6);
    let header = (448 * 256 * 9 + 512) + 4 * (256 * 256 * 9 + 512) + (256 * 7 * 9 + 7);
    assert_eq!(analytic_param_count(&DetectorConfig::default(), 23), backbone + header);
}

#[test]
fn classification_prior() {
    let net: Network<f32> = new_detector(&tiny(), 3, 1).unwrap();
    let x = Tensor::zeros(&[1, 3, 16, 16]);
    let out = net.infer(&x).unwrap();
    // zero input: header output is bias-dominated after batch norm
    assert!(out.data[..16].iter().all(|&p| (p - 0.01).abs() < 0.01));
}

#[test]
fn invalid_configs_rejected() {
    let mut c = tiny();
    c.score_thresh = 1.5;
    assert!(build_detector(&c, 3).is_err());
    let mut c = tiny();
    c.blocks[2] = 0;
    assert!(build_detector(&c, 3).is_err());
    assert!(build_detector(&tiny(), 0).is_err());
    let text = r#"{"blocks":[1,1,1,1],"bogus":1}"#;
    assert!(serde_json::from_str::<DetectorConfig>(text).is_err());
}

fn perfect_output(t: &TargetMaps, stats: &NormStats) -> Vec<f64> {
    let hw = t.rows * t.cols;
    let mut out = vec![0.0; OUTPUT_CHANNELS * hw];
    for i in 0..hw {
        out[i] = if t.cls[i] == ClsTarget::Positive { 0.9 } else { 0.05 };
    }
    for (i, raw) in &t.positives {
        let z = stats.standardize(raw);
        for k in 0..REG_CHANNELS {
            out[(k + 1) * hw + i] = z[k];
        }
    }
    out
}

#[test]
fn decode_threshold_and_round_trip() {
    let bev = small_bev();
    let cfg = tiny();
    let labels = [OrientedBox::new(8.1, 2.3, 4.4, 1.8, 0.3), OrientedBox::new(18.0, -6.0, 4.0, 1.7, -1.2)];
    let t = assign_targets(&labels, &bev, None, &cfg);
    let stats = compute_norm_stats(std::slice::from_ref(&t)).unwrap();
    let out = perfect_output(&t, &stats);
    let (h, w) = bev.output_dims();
    let dets = decode_detections(&out, h, w, &stats, &bev, &cfg, None);
    assert_eq!(dets.len(), 2);
    for l in &labels {
        let d = dets.iter().find(|d| rotated_iou(d, l) > 0.999).expect("label recovered");
        let dt = (d.theta - l.theta).rem_euclid(std::f64::consts::PI);
        assert!(dt.min(std::f64::consts::PI - dt) < 1e-9);
    }
    let mut low = out.clone();
    low[..h * w].iter_mut().for_each(|p| *p = 0.1);
    assert!(decode_detections(&low, h, w, &stats, &bev, &cfg, None).is_empty());
}

#[test]
fn output_masking_all_ones_and_zeros() {
    let bev = small_bev();
    let cfg = tiny();
    let labels = [OrientedBox::new(8.1, 2.3, 4.4, 1.8, 0.3), OrientedBox::new(18.0, -6.0, 4.0, 1.7, -1.2)];
    let t = assign_targets(&labels, &bev, None, &cfg);
    let stats = compute_norm_stats(std::slice::from_ref(&t)).unwrap();
    let out = perfect_output(&t, &stats);
    let (h, w) = bev.output_dims();
    let ones = Mask::filled(bev.rows(), bev.cols(), 1);
    let zeros = Mask::filled(bev.rows(), bev.cols(), 0);
    let base = decode_detections(&out, h, w, &stats, &bev, &cfg, None);
    assert_eq!(decode_detections(&out, h, w, &stats, &bev, &cfg, Some(&ones)), base);
    assert!(decode_detections(&out, h, w, &stats, &bev, &cfg, Some(&zeros)).is_empty());

    let mut masked = t.clone();
    masked.ignore_outside(&output_mask(&zeros, &bev));
    assert_eq!(masked.count(ClsTarget::Ignore), h * w);
    assert!(masked.positives.is_empty());
}

#[test]
fn every_labeled_vehicle_reachable_before_nms() {
    let bev = BevConfig::new((0.0, 70.4), (-16.0, 16.0), (-2.0, 2.0), 0.4, 0.4, 0.4).unwrap();
    let cfg = DetectorConfig::default();
    let lidar = LidarSpec {
        azimuth_step: 1.0,
        elevation_angles: vec![-10.0, -5.0],
        range_noise_sigma: 0.02,
        max_range: 80.0,
        azimuth_range: (-60.0, 60.0),
        sensor_height: 1.8,
    };
    for seed in 0..20 {
        let mut spec = SceneSpec::new(seed, 2.0, 5.0, 0.003, 6, lidar.clone());
        spec.n_parked = 3;
        let scene = generate_scene(&spec).unwrap();
        let labels: Vec<_> = scene
            .labels()
            .into_iter()
            .filter(|b| bev.cell_of(b.cx, b.cy).is_some())
            .collect();
        let t = assign_targets(&labels, &bev, None, &cfg);
        let stats = compute_norm_stats(std::slice::from_ref(&t)).unwrap_or(NormStats::IDENTITY);
        let out = perfect_output(&t, &stats);
        let (h, w) = bev.output_dims();
        let cands = decode_candidates(&out, h, w, &stats, &bev, 0.5);
        for l in &labels {
            assert!(cands.iter().any(|d| rotated_iou(d, l) >= 0.7), "seed {seed}: {l:?} unreachable");
        }
    }
}

#[test]
fn full_head_gradient_matches_finite_differences() {
    let err = head_gradient_check(4).unwrap();
    assert!(err < 1e-3, "{err}");
}

fn training_frame(bev: &BevConfig, cfg: &DetectorConfig, seed: u64) -> (TrainSample, Vec<OrientedBox>) {
    let lidar = LidarSpec {
        azimuth_step: 0.5,
        elevation_angles: (0..16).map(|i| -16.0 + i as f64).collect(),
        range_noise_sigma: 0.02,
        max_range: 40.0,
        azimuth_range: (-60.0, 60.0),
        sensor_height: 1.8,
    };
    let mut spec = SceneSpec::new(seed, 0.0, 5.0, 0.0, 3, lidar);
    spec.placement_x = (5.0, 22.0);
    let scene = generate_scene(&spec).unwrap();
    let labels = scene.labels();
    let input = rasterize(&scene.cloud, bev, None);
    let targets = assign_targets(&labels, bev, None, cfg);
    (
        TrainSample {
            input,
            targets,
            road: None,
        },
        labels,
    )
}

#[test]
fn overfits_single_frame() {
    let bev = small_bev();
    let cfg = tiny();
    let (sample, _) = training_frame(&bev, &cfg, 3);
    let stats = compute_norm_stats(std::slice::from_ref(&sample.targets)).unwrap();
    let net = new_detector(&cfg, bev.channels(), 5).unwrap();
    let hyper = TrainHyper {
        lr: 0.01,
        batch: 1,
        epochs: 200,
        decay_epochs: vec![],
        ..TrainHyper::default()
    };
    let out = train_detector(net, &cfg, &stats, &vec![sample], &hyper, &mut |_, _| Ok(None)).unwrap();
    let first = out.log[0].cls + out.log[0].reg;
    let last = out.log.last().map(|r| r.cls + r.reg).unwrap();
    assert_eq!(out.log.len(), 200);
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn training_is_deterministic_and_lr_zero_is_inert() {
    let bev = small_bev();
    let cfg = DetectorConfig {
        road_fusion: RoadFusion::InputFusion,
        ..tiny()
    };
    let frames: Vec<_> = (0..3)
        .map(|s| {
            let (mut f, _) = training_frame(&bev, &cfg, 10 + s);
            let road = Mask::filled(bev.rows(), bev.cols(), 1);
            f.input = crate::bevgrid::concat_road_channel(&f.input, &road).unwrap();
            f
        })
        .collect();
    let stats = compute_norm_stats(&frames.iter().map(|f| f.targets.clone()).collect::<Vec<_>>()).unwrap();
    let hyper = TrainHyper {
        lr: 0.005,
        batch: 2,
        epochs: 3,
        decay_epochs: vec![2],
        ..TrainHyper::default()
    };
    let run = |h: &TrainHyper| {
        let net = new_detector::<f32>(&cfg, cfg.in_channels(&bev), 8).unwrap();
        train_detector(net, &cfg, &stats, &frames, h, &mut |_, e| Ok(Some(e as f64))).unwrap()
    };
    let a = run(&hyper);
    let b = run(&hyper);
    assert_eq!(a.log, b.log);
    assert_eq!(a.epochs.len(), 3);
    assert_eq!(a.epochs[2].val_ap, Some(2.0));
    assert_eq!(a.log.last().unwrap().lr, 0.0005);
    for (x, y) in a.net.params.iter().zip(&b.net.params) {
        assert!(x.data.iter().zip(&y.data).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    let init = new_detector::<f32>(&cfg, cfg.in_channels(&bev), 8).unwrap();
    let frozen = run(&TrainHyper { lr: 0.0, ..hyper.clone() });
    for i in 0..init.params.len() {
        if init.param_kind(i).learnable() {
            assert_eq!(init.params[i], frozen.net.params[i]);
        }
    }
}

#[test]
fn nan_input_reports_divergence() {
    let bev = small_bev();
    let cfg = tiny();
    let (mut sample, _) = training_frame(&bev, &cfg, 3);
    let stats = compute_norm_stats(std::slice::from_ref(&sample.targets)).unwrap();
    sample.input.data[17] = f32::NAN;
    let net = new_detector(&cfg, bev.channels(), 5).unwrap();
    let hyper = TrainHyper {
        batch: 1,
        epochs: 1,
        ..TrainHyper::default()
    };
    let err = train_detector(net, &cfg, &stats, &vec![sample], &hyper, &mut |_, _| Ok(None)).err().unwrap();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bev = small_bev();
    let cfg = DetectorConfig {
        road_fusion: RoadFusion::OutputMasking,
        ..tiny()
    };
    let det = Detector {
        net: new_detector(&cfg, cfg.in_channels(&bev), 3).unwrap(),
        config: cfg,
        stats: NormStats {
            mean: [0.1, 0.2, 0.0, 0.0, 0.5, 1.5],
            std: [0.7, 0.7, 0.5, 0.5, 0.1, 0.1],
        },
        bev,
    };
    let path = dir.path().join("det.bin");
    det.save(&path).unwrap();
    let back = Detector::load(&path).unwrap();
    assert_eq!(back.config, det.config);
    assert_eq!(back.stats, det.stats);
    assert_eq!(back.net.params, det.net.params);

    let (sample, _) = training_frame(&bev, &det.config, 1);
    let road = Mask::filled(bev.rows(), bev.cols(), 1);
    let a = det.detect(&[&sample.input], Some(&[&road])).unwrap();
    let b = back.detect(&[&sample.input], Some(&[&road])).unwrap();
    assert_eq!(a, b);
    assert!(matches!(det.detect(&[&sample.input], None), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn monotone_score_maps_keep_nms_order(
        seed in 0u64..1000,
        a in 0.2f64..5.0,
        b in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets: Vec<OrientedBox> = (0..40)
            .map(|_| {
                OrientedBox::new(
                    rng.random_range(0.0..20.0),
                    rng.random_range(0.0..20.0),
                    rng.random_range(3.0..5.0),
                    rng.random_range(1.5..2.0),
                    rng.random_range(-3.0..3.0),
                )
                .with_score(rng.random_range(0.01..0.99))
            })
            .collect();
        let mapped: Vec<OrientedBox> = dets
            .iter()
            .map(|d| {
                let p = d.score.unwrap();
                let z = a * (p / (1.0 - p)).ln() + b;
                d.with_score(1.0 / (1.0 + (-z).exp()))
            })
            .collect();
        prop_assert_eq!(nms_indices(&dets, 0.1), nms_indices(&mapped, 0.1));
    }
}

#[test]
fn step_decay_and_warmup_schedule() {
    let h = TrainHyper {
        lr: 0.01,
        decay_epochs: vec![30, 45],
        warmup_steps: 4,
        ..TrainHyper::default()
    };
    assert!((h.lr_at(29) - 0.01).abs() < 1e-12);
    assert!((h.lr_at(30) - 0.001).abs() < 1e-12);
    assert!((h.lr_at(45) - 0.0001).abs() < 1e-12);
    assert!((h.lr_at_step(0, 0) - 0.0025).abs() < 1e-12);
    assert!((h.lr_at_step(0, 3) - 0.01).abs() < 1e-12);
    assert!((h.lr_at_step(31, 4) - 0.001).abs() < 1e-12);
    let plain = TrainHyper { warmup_steps: 0, ..h };
    assert_eq!(plain.lr_at_step(0, 0), plain.lr_at(0));
}
