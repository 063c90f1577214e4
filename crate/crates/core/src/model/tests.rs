use super::*;
use crate::geometry::{Camera, DepthImage, Intrinsics};
use crate::tensor::Tensor;

fn camera() -> Camera {
    let k = Intrinsics {
        fx: 8.0,
        fy: 8.0,
        cx: 8.0,
        cy: 8.0,
    };
    Camera::look_at(k, [0.6, 0.5, 1.2], [2.4, 2.4, 0.8]).unwrap()
}

fn ramp(h: usize, w: usize) -> DepthImage {
    DepthImage {
        height: h,
        width: w,
        data: (0..h * w).map(|i| 1.0 + (i % 7) as f64 * 0.3).collect(),
    }
}

fn obs<'a>(depth: &'a DepthImage, cam: &'a Camera, prior: Option<&'a DepthImage>) -> Observation<'a> {
    Observation {
        depth,
        camera: cam,
        prior,
    }
}

fn random_features(config: &ModelConfig, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = config.feature_hw();
    let mut t = Tensor::zeros(&[h * w, config.decoder_channels]);
    t.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    t
}

#[test]
fn default_shapes() {
    let cfg = ModelConfig::student();
    let p = init_params(&cfg, 0).unwrap();
    let img = ramp(32, 32);
    let cam = Camera::look_at(
        Intrinsics {
            fx: 16.0,
            fy: 16.0,
            cx: 16.0,
            cy: 16.0,
        },
        [1.0, 1.0, 1.4],
        [2.4, 2.4, 1.0],
    )
    .unwrap();
    let (enc, trace) = forward(&p, &cfg, obs(&img, &cam, None), None).unwrap();
    assert_eq!(enc.features.shape, vec![64, cfg.decoder_channels]);
    assert_eq!(trace.n_layers(), 3);
    assert_eq!(trace.last_prediction().len(), 1024);
    for (d, layer) in trace.layers.iter().enumerate() {
        assert_eq!(layer.len(), 64);
        let r = cfg.points_per_layer[d];
        assert!(layer
            .iter()
            .all(|q| q.points.len() == r && q.logits.len() == r * cfg.n_classes));
        assert_eq!(trace.predictions[d].len(), 64 * r);
    }
}

#[test]
fn encoder_contract() {
    let cfg = ModelConfig::tiny(false);
    let p = init_params(&cfg, 1).unwrap();
    let zero = DepthImage::zeros(16, 16);
    let a = encode(&p, &cfg, &zero).unwrap();
    assert!(a.features.is_finite());
    let img = ramp(16, 16);
    assert_eq!(
        encode(&p, &cfg, &img).unwrap().features,
        encode(&p, &cfg, &img).unwrap().features
    );

    let mut wide = cfg.clone();
    wide.encoder.width *= 2;
    let pw = init_params(&wide, 1).unwrap();
    assert!(param_count(&pw) > param_count(&p));
    assert_eq!(encode(&pw, &wide, &img).unwrap().features.shape, a.features.shape);

    let mut bad = img.clone();
    bad.data[3] = f64::NAN;
    assert!(matches!(encode(&p, &cfg, &bad), Err(Error::NonFinite(_))));
    assert!(encode(&p, &cfg, &ramp(8, 8)).is_err());
}

#[test]
fn forward_is_deterministic_and_override_matches() {
    let cfg = ModelConfig::tiny(true);
    let p = init_params(&cfg, 2).unwrap();
    let img = ramp(16, 16);
    let cam = camera();
    let (_, a) = forward(&p, &cfg, obs(&img, &cam, None), None).unwrap();
    let (_, b) = forward(&p, &cfg, obs(&img, &cam, None), None).unwrap();
    let (_, c) = forward(&p, &cfg, obs(&img, &cam, None), Some(embeddings(&p))).unwrap();
    assert_eq!(a.layers, b.layers);
    assert_eq!(a.layers, c.layers);
    assert_eq!(a.predictions, c.predictions);
}

#[test]
fn query_permutation_equivariance() {
    let cfg = ModelConfig::tiny(true);
    let p = init_params(&cfg, 3).unwrap();
    let feats = random_features(&cfg, 3);
    let cam = camera();
    let q = embeddings(&p);
    let perm = [2usize, 0, 3, 1];
    let qp: Vec<_> = perm.iter().map(|&i| q[i].clone()).collect();
    let a = forward_from_features(&p, &cfg, &feats, &cam, None, q).unwrap();
    let b = forward_from_features(&p, &cfg, &feats, &cam, None, qp).unwrap();
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(lb[k], la[i]);
        }
    }
}

#[test]
fn single_point_layer_and_zero_regression() {
    let cfg = ModelConfig::tiny(true);
    let mut p = init_params(&cfg, 4).unwrap();
    let feats = random_features(&cfg, 4);
    let cam = camera();
    let q = embeddings(&p);
    let l0 = decode_layer(&p, &cfg, 0, &q, &feats, &cam, None).unwrap();
    assert!(l0.iter().all(|s| s.points.len() == 1 && s.center == s.points[0]));

    for name in ["head.1.reg.w", "head.1.reg.b"] {
        let t = p[name].zeros_like();
        p.insert(name.into(), t);
    }
    let l1 = decode_layer(&p, &cfg, 1, &q, &feats, &cam, None).unwrap();
    for (s, (c, _)) in l1.iter().zip(&q) {
        assert_eq!(s.points.len(), 3);
        assert!(s.points.iter().all(|pt| pt == c));
        assert!((0..3).all(|a| (s.center[a] - c[a]).abs() < 1e-15));
    }
    assert!(decode_layer(&p, &cfg, 2, &q, &feats, &cam, None).is_err());
}

#[test]
fn zero_depth_branch_leaves_forward_unchanged() {
    let mut with = ModelConfig::tiny(true);
    with.depth_branch = true;
    let p = init_params(&with, 5).unwrap();
    let mut without = with.clone();
    without.depth_branch = false;
    let img = ramp(16, 16);
    let prior = ramp(16, 16);
    let cam = camera();
    let (_, a) = forward(&p, &with, obs(&img, &cam, Some(&prior)), None).unwrap();
    let (_, b) = forward(&p, &without, obs(&img, &cam, None), None).unwrap();
    assert_eq!(a.layers, b.layers);
    assert!(forward(&p, &with, obs(&img, &cam, None), None).is_err());
}

#[test]
fn depth_branch_pinhole_example() {
    let k = Intrinsics {
        fx: 100.0,
        fy: 100.0,
        cx: 50.0,
        cy: 50.0,
    };
    let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let cam = Camera::new(k, identity, [0.0; 3]).unwrap();
    let proj = cam.project([0.0, 0.0, 2.0]);
    assert_eq!(proj.pixel, Some((50.0, 50.0)));
    assert_eq!(proj.cam[2], 2.0);

    let mut cfg = ModelConfig::tiny(true);
    cfg.depth_branch = true;
    let p = init_params(&cfg, 6).unwrap();
    let prior = DepthImage {
        height: 100,
        width: 100,
        data: vec![2.0; 100 * 100],
    };
    // zero output layer: f_d = 0
    let fd = depth_branch(&p, &cfg, [0.0, 0.0, 2.0], &cam, &prior).unwrap();
    assert!(fd.iter().all(|&v| v == 0.0));
    let mut without = cfg.clone();
    without.depth_branch = false;
    assert!(depth_branch(&p, &without, [0.0, 0.0, 2.0], &cam, &prior).is_err());
}

#[test]
fn teacher_guided_init_contract() {
    let s_cfg = ModelConfig::tiny(true);
    let t_cfg = ModelConfig::tiny(false);
    let teacher = init_params(&t_cfg, 7).unwrap();
    let original = init_params(&s_cfg, 8).unwrap();

    let mut kept = original.clone();
    teacher_guided_init(&mut kept, &teacher, false).unwrap();
    assert_eq!(kept["query.embed"], original["query.embed"]);

    let mut student = original.clone();
    teacher_guided_init(&mut student, &teacher, true).unwrap();
    for (name, t) in &student {
        if is_decoder_side(name) || name == "query.embed" {
            assert_eq!(t, &teacher[name], "{name}");
        } else {
            assert_eq!(t, &original[name], "{name}");
        }
    }
    assert!(student.contains_key("proj.w"));
    assert_ne!(student["encoder.0.w"].shape, teacher["encoder.0.w"].shape);

    let feats = random_features(&s_cfg, 9);
    let cam = camera();
    let a = forward_from_features(&student, &s_cfg, &feats, &cam, None, embeddings(&student)).unwrap();
    let b = forward_from_features(&teacher, &t_cfg, &feats, &cam, None, embeddings(&teacher)).unwrap();
    assert_eq!(a.layers, b.layers);

    let mut other = ModelConfig::tiny(false);
    other.feature_dim = 6;
    let mismatched = init_params(&other, 1).unwrap();
    assert!(teacher_guided_init(&mut student, &mismatched, true).is_err());
}

#[test]
fn config_inference_and_checkpoint_round_trip() {
    let mut with_depth = ModelConfig::tiny(true);
    with_depth.depth_branch = true;
    for cfg in [with_depth, ModelConfig::teacher()] {
        let mut p = init_params(&cfg, 10).unwrap();
        assert_eq!(ModelConfig::infer(&p).unwrap(), cfg);
        quantize(&mut p);
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
        assert_eq!(encode_checkpoint(&decode_checkpoint(&bytes).unwrap()), bytes);

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_checkpoint(&trailing).is_err());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).is_err());
    }
}

#[test]
fn checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut p = init_params(&ModelConfig::tiny(true), 11).unwrap();
    save_checkpoint(&p, &path).unwrap();
    quantize(&mut p);
    assert_eq!(load_checkpoint(&path).unwrap(), p);
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn init_is_seeded() {
    let cfg = ModelConfig::tiny(true);
    assert_eq!(init_params(&cfg, 12).unwrap(), init_params(&cfg, 12).unwrap());
    assert_ne!(init_params(&cfg, 12).unwrap(), init_params(&cfg, 13).unwrap());
    let p = init_params(&cfg, 12).unwrap();
    for (c, f) in embeddings(&p) {
        assert!((0..3).all(|a| c[a] >= cfg.scene_lo[a] && c[a] <= cfg.scene_hi[a]));
        assert!(f.iter().all(|v| v.abs() <= 0.02));
    }
}

#[test]
fn simulated_prior_is_close_and_seeded() {
    let clean = ramp(16, 16);
    let a = simulate_depth_prior(&clean, PRIOR_SIGMA, 1);
    assert_eq!(a, simulate_depth_prior(&clean, PRIOR_SIGMA, 1));
    assert_ne!(a, simulate_depth_prior(&clean, PRIOR_SIGMA, 2));
    let mean_abs: f64 = a.data.iter().zip(&clean.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / 256.0;
    assert!(mean_abs < 1.0);
    let flat = DepthImage {
        height: 8,
        width: 8,
        data: vec![2.0; 64],
    };
    let smooth = simulate_depth_prior(&flat, 0.0, 0);
    assert!(smooth.data.iter().all(|v| (v - 2.0).abs() < 1e-12));
}
