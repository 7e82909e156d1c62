mod common;

use sstdunet_core::encoder::{
    merge_neighbourhood, patch_embed, patch_merge, register_patch_embed, register_patch_merge,
    Encoder, EncoderConfig,
};
use sstdunet_core::network::{
    count_parameters, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for,
    save_checkpoint, ModelConfig, SstDUNet,
};
use sstdunet_core::tensor::{finite_diff_check_many, Bindings, ParamInit, ParamStore};
use sstdunet_core::{Error, Tensor, Var};

use common::{randomize, uniform};

fn cf(t: &Tensor<f32>) -> Var<f32> {
    Var::constant(t.clone())
}

// --------------------------------------------------------------- encoder

#[test]
fn patch_embed_default_shape_and_zero_input() {
    let mut store = ParamStore::<f32>::new();
    register_patch_embed(&mut store, &mut ParamInit::new(1), "embed", 1, 48).unwrap();
    let b = store.bind_frozen();
    let x = uniform::<f32>(&[1, 1, 128, 128, 64], 0.0, 1.0, 1);
    let y = patch_embed(&b, "embed", &cf(&x)).unwrap();
    assert_eq!(y.shape(), &[1, 48, 64, 64, 32]);

    let z = patch_embed(&b, "embed", &cf(&Tensor::zeros(&[1, 1, 4, 4, 4]))).unwrap();
    assert!(z.value().data().iter().all(|&v| v == 0.0));

    let odd = cf(&Tensor::zeros(&[1, 1, 5, 4, 4]));
    assert!(matches!(patch_embed(&b, "embed", &odd), Err(Error::Shape(_))));
}

fn check_gradients(store: &ParamStore<f64>, x: Tensor<f64>, f: impl Fn(&Bindings<f64>, &Var<f64>) -> sstdunet_core::Result<Var<f64>>) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_owned()).collect();
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let mut coords = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        for i in (0..t.numel()).step_by((t.numel() / 6).max(1)) {
            coords.push((k, i));
        }
    }
    let report = finite_diff_check_many(
        |vars| {
            let b = Bindings::from_vars(names.iter().cloned().zip(vars[1..].iter().cloned()));
            let y = f(&b, &vars[0])?;
            let w = Tensor::from_fn(y.shape(), |i| ((i % 7) as f64 - 3.0) / 3.0);
            Ok(y.mul(&Var::constant(w))?.sum())
        },
        &inputs,
        &coords,
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    // Kinks are met only occasionally; the bulk must pass the central test.
    assert!(report.one_sided * 20 <= report.checked, "{report:?}");
}

#[test]
fn patch_embed_and_merge_gradients() {
    let mut store = ParamStore::<f64>::new();
    register_patch_embed(&mut store, &mut ParamInit::new(2), "embed", 1, 4).unwrap();
    randomize(&mut store, 2, 0.7);
    check_gradients(&store, uniform(&[1, 1, 4, 4, 4], -2.0, 2.0, 3), |b, x| patch_embed(b, "embed", x));

    let mut store = ParamStore::<f64>::new();
    register_patch_merge(&mut store, &mut ParamInit::new(4), "merge", 2).unwrap();
    randomize(&mut store, 4, 0.7);
    check_gradients(&store, uniform(&[1, 2, 4, 4, 2], -2.0, 2.0, 5), |b, x| patch_merge(b, "merge", x));
}

#[test]
fn merge_concatenates_neighbourhoods_z_major() {
    // Token value encodes its coordinate: 100 z + 10 y + x.
    let x = Tensor::<f32>::from_fn(&[1, 2, 2, 2, 1], |i| {
        let (z, y, xx) = (i / 4, (i / 2) % 2, i % 2);
        (100 * z + 10 * y + xx) as f32
    });
    let m = merge_neighbourhood(&cf(&x)).unwrap();
    assert_eq!(m.shape(), &[1, 1, 1, 1, 8]);
    assert_eq!(m.value().data(), &[0., 1., 10., 11., 100., 101., 110., 111.]);
}

#[test]
fn patch_merge_shapes_and_constant_input() {
    let mut store = ParamStore::<f32>::new();
    let mut init = ParamInit::new(6);
    register_patch_merge(&mut store, &mut init, "m1", 48).unwrap();
    register_patch_merge(&mut store, &mut init, "m2", 96).unwrap();
    register_patch_merge(&mut store, &mut init, "m3", 192).unwrap();
    randomize(&mut store, 6, 0.3);
    let b = store.bind_frozen();
    let x = uniform::<f32>(&[1, 48, 64, 64, 32], -1.0, 1.0, 7);
    let y = patch_merge(&b, "m1", &cf(&x)).unwrap();
    assert_eq!(y.shape(), &[1, 96, 32, 32, 16]);
    let y = patch_merge(&b, "m2", &y).unwrap();
    let y = patch_merge(&b, "m3", &y).unwrap();
    assert_eq!(y.shape(), &[1, 384, 8, 8, 4]);

    let k = Tensor::from_fn(&[1, 48, 4, 4, 4], |i| (i / 64) as f32 * 0.1);
    let y = patch_merge(&b, "m1", &cf(&k)).unwrap();
    for ch in y.value().data().chunks(8) {
        assert!(ch.iter().all(|&v| v == ch[0]));
    }
}

#[test]
fn encoder_ladder_at_test_scale_and_batch_independence() {
    let cfg = ModelConfig::test_scale();
    let enc = Encoder::new("encoder", cfg.encoder.clone(), cfg.input_size).unwrap();
    let mut store = ParamStore::<f32>::new();
    enc.register(&mut store, &mut ParamInit::new(8)).unwrap();
    randomize(&mut store, 8, 0.2);
    let b = store.bind_frozen();
    let x = uniform::<f32>(&[2, 1, 32, 32, 16], 0.0, 1.0, 9);
    let feats = enc.forward(&b, &cf(&x)).unwrap();
    let shapes: Vec<&[usize]> = feats.iter().map(|f| f.shape()).collect();
    assert_eq!(
        shapes,
        vec![&[2, 8, 16, 16, 8][..], &[2, 16, 8, 8, 4], &[2, 32, 4, 4, 2], &[2, 64, 2, 2, 1]]
    );
    let half = 32 * 32 * 16;
    for s in 0..2 {
        let xs = Tensor::new(&[1, 1, 32, 32, 16], x.data()[s * half..(s + 1) * half].to_vec()).unwrap();
        let single = enc.forward(&b, &cf(&xs)).unwrap();
        for (f, g) in feats.iter().zip(&single) {
            let n = g.value().numel();
            assert_eq!(&f.value().data()[s * n..(s + 1) * n], g.value().data());
        }
    }
}

#[test]
fn encoder_with_zero_residual_projections_reduces_to_embed_and_merge() {
    let cfg = ModelConfig::test_scale();
    let enc = Encoder::new("encoder", cfg.encoder.clone(), cfg.input_size).unwrap();
    let mut store = ParamStore::<f32>::new();
    enc.register(&mut store, &mut ParamInit::new(10)).unwrap();
    let b = store.bind_frozen();
    let x = uniform::<f32>(&[1, 1, 32, 32, 16], 0.0, 1.0, 11);
    let feats = enc.forward(&b, &cf(&x)).unwrap();
    let mut h = patch_embed(&b, "encoder.embed", &cf(&x)).unwrap();
    for s in 1..=3 {
        assert_eq!(feats[s - 1].value(), h.value());
        h = patch_merge(&b, &format!("encoder.merge{s}"), &h).unwrap();
    }
    assert_eq!(feats[3].value(), h.value());
}

#[test]
fn encoder_rejects_incompatible_inputs() {
    assert!(matches!(
        Encoder::new("e", EncoderConfig::default(), [40, 32, 32]),
        Err(Error::Shape(_))
    ));
}

// --------------------------------------------------------------- network

#[test]
fn parameter_counts() {
    let mut single = ParamStore::<f32>::new();
    single.insert("w", Tensor::zeros(&[1, 1, 3, 3, 3])).unwrap();
    single.insert("b", Tensor::zeros(&[1])).unwrap();
    assert_eq!(count_parameters(&single), 28);

    let default = SstDUNet::new(ModelConfig::default()).unwrap().parameter_count().unwrap();
    let test = SstDUNet::new(ModelConfig::test_scale()).unwrap().parameter_count().unwrap();
    assert!((6_250_000..=18_750_000).contains(&default), "{default}");
    assert!(test < default);
}

#[test]
fn init_weights_is_seeded() {
    let net = SstDUNet::new(ModelConfig::test_scale()).unwrap();
    let a = net.init_weights::<f32>(5).unwrap();
    let b = net.init_weights::<f32>(5).unwrap();
    let c = net.init_weights::<f32>(6).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    let masks: Vec<_> = a.iter().filter(|(n, _)| n.ends_with("smart_mask")).collect();
    assert_eq!(masks.len(), 3);
    assert!(masks.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn test_scale_forward_shape_and_range() {
    let net = SstDUNet::new(ModelConfig::test_scale()).unwrap();
    let mut params = net.init_weights::<f32>(7).unwrap();
    randomize(&mut params, 7, 0.05);
    let x = uniform::<f32>(&[2, 1, 32, 32, 16], 0.0, 1.0, 12);
    let y = net.predict(&params, &x).unwrap();
    assert_eq!(y.shape(), &[2, 1, 32, 32, 16]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(matches!(
        net.predict(&params, &Tensor::zeros(&[1, 1, 32, 32, 32])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn shape_trace_of_default_config() {
    let net = SstDUNet::new(ModelConfig::default()).unwrap();
    let trace = net.shape_trace();
    let get = |name: &str| trace.iter().find(|e| e.stage == name).unwrap().shape;
    assert_eq!(get("encoder.F1"), [48, 64, 64, 32]);
    assert_eq!(get("encoder.F2"), [96, 32, 32, 16]);
    assert_eq!(get("encoder.F3"), [192, 16, 16, 8]);
    assert_eq!(get("encoder.F4"), [384, 8, 8, 4]);
    assert_eq!(get("bridge")[1..], [4, 4, 2]);
    assert_eq!(get("head"), [1, 128, 128, 64]);
}

#[test]
fn tiny_model_gradient_matches_finite_differences() {
    let net = SstDUNet::new(ModelConfig::tiny()).unwrap();
    let mut store = net.init_weights::<f64>(8).unwrap();
    randomize(&mut store, 8, 0.4);
    let x = uniform::<f64>(&[1, 1, 16, 16, 16], 0.0, 1.0, 13);
    check_gradients(&store, x, |b, x| net.forward(b, x));
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let cfg = ModelConfig::test_scale();
    let net = SstDUNet::new(cfg.clone()).unwrap();
    let mut params = net.init_weights::<f32>(9).unwrap();
    randomize(&mut params, 9, 0.05);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&cfg, &params, &path).unwrap();
    let (cfg2, loaded) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(loaded, params);
    let x = uniform::<f32>(&[1, 1, 32, 32, 16], 0.0, 1.0, 14);
    assert_eq!(
        net.predict(&params, &x).unwrap().checksum(),
        net.predict(&loaded, &x).unwrap().checksum()
    );
}

#[test]
fn checkpoint_errors() {
    let cfg = ModelConfig::tiny();
    let net = SstDUNet::new(cfg.clone()).unwrap();
    let params = net.init_weights::<f32>(10).unwrap();
    let bytes = encode_checkpoint(&cfg, &params).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.ckpt");
    save_checkpoint(&cfg, &params, &path).unwrap();
    assert!(matches!(
        load_checkpoint_for(&path, &ModelConfig::test_scale()),
        Err(Error::Checkpoint(_))
    ));
    assert!(load_checkpoint_for(&path, &cfg).is_ok());

    for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[8] = 99;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));

    // Records that do not match the embedded config are rejected.
    let other = SstDUNet::new(ModelConfig::test_scale()).unwrap().init_weights::<f32>(0).unwrap();
    let forged = encode_checkpoint(&cfg, &other).unwrap();
    assert!(matches!(decode_checkpoint(&forged), Err(Error::Checkpoint(_))));
}

#[test]
fn f64_checkpoint_loads_as_f32() {
    let cfg = ModelConfig::tiny();
    let net = SstDUNet::new(cfg.clone()).unwrap();
    let params = net.init_weights::<f64>(11).unwrap();
    let (_, loaded) = decode_checkpoint(&encode_checkpoint(&cfg, &params).unwrap()).unwrap();
    assert_eq!(loaded, params.cast::<f32>());
}
