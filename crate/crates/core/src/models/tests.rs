use super::*;
use crate::losses::loss_reconstruction;
use crate::tensor::{gradient_check, Adam, AdamConfig};
use crate::tolerance::{GRAD_REL_TOL, PROB_SUM_TOL_F32};
use rand::Rng;

fn rand_tensor<E: Real>(seed: u64, shape: &[usize]) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| E::lit(rng.random::<f64>()))
}

fn gen_cfg(side: usize) -> GeneratorConfig {
    GeneratorConfig {
        side,
        ..GeneratorConfig::default()
    }
}

fn gen_output_shape(side: usize, batch: usize) -> Vec<usize> {
    let g = Generator::<f32>::new(gen_cfg(side), 1).unwrap();
    let mut tape = Tape::new();
    let p = g.params.bind(&mut tape, false);
    let x = tape.constant(rand_tensor(2, &[batch, 1, side, side]));
    let y = g.forward(&mut tape, &p, x).unwrap();
    let v = tape.value(y).unwrap();
    assert!(v.data().iter().all(|&o| o > 0.0 && o < 1.0));
    v.shape().to_vec()
}

#[test]
fn generator_shape_contract() {
    assert_eq!(gen_output_shape(32, 2), vec![2, 1, 32, 32, 32]);
    assert_eq!(gen_output_shape(16, 1), vec![1, 1, 16, 16, 16]);
    assert_eq!(gen_output_shape(48, 1), vec![1, 1, 48, 48, 48]);
}

#[test]
fn generator_rejects_wrong_side() {
    let g = Generator::<f32>::new(gen_cfg(16), 1).unwrap();
    let mut tape = Tape::new();
    let p = g.params.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
    assert!(matches!(g.forward(&mut tape, &p, x), Err(Error::Contract(_))));
    assert!(Generator::<f32>::new(gen_cfg(20), 1).is_err());
}

#[test]
fn zero_weights_give_analytic_outputs() {
    let mut g = Generator::<f64>::new(gen_cfg(16), 1).unwrap();
    g.params.set_zero();
    let mut tape = Tape::new();
    let p = g.params.bind(&mut tape, false);
    let x = tape.constant(rand_tensor(3, &[1, 1, 16, 16]));
    let y = g.forward(&mut tape, &p, x).unwrap();
    assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.5));

    let mut d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 1).unwrap();
    d.params.set_zero();
    let p = d.params.bind(&mut tape, false);
    let v = tape.constant(rand_tensor(4, &[1, 1, 32, 32, 32]));
    let x = tape.constant(rand_tensor(5, &[1, 1, 32, 32]));
    let s = d.forward(&mut tape, &p, v, x).unwrap();
    assert_eq!(tape.value(s).unwrap().shape(), &[1, 1, 4, 4, 4]);
    assert!(tape.value(s).unwrap().data().iter().all(|&v| v == 0.0));

    let mut c = Classifier::<f64>::new(ClassifierConfig::default(), 1).unwrap();
    c.params.set_zero();
    let p = c.params.bind(&mut tape, false);
    let pr = c.forward(&mut tape, &p, v).unwrap();
    assert!(tape.value(pr).unwrap().data().iter().all(|&v| v == 1.0 / 3.0));
}

#[test]
fn discriminator_and_classifier_shapes_across_sides() {
    for side in [16, 32, 48] {
        let mut tape = Tape::<f32>::new();
        let d = Discriminator::<f32>::new(DiscriminatorConfig { side, ..Default::default() }, 2).unwrap();
        let p = d.params.bind(&mut tape, false);
        let v = tape.constant(rand_tensor(1, &[2, 1, side, side, side]));
        let x = tape.constant(rand_tensor(2, &[2, 1, side, side]));
        let s = d.forward(&mut tape, &p, v, x).unwrap();
        let g = side / 8;
        assert_eq!(tape.value(s).unwrap().shape(), &[2, 1, g, g, g]);

        let c = Classifier::<f32>::new(ClassifierConfig { side, ..Default::default() }, 3).unwrap();
        let p = c.params.bind(&mut tape, false);
        let pr = c.forward(&mut tape, &p, v).unwrap();
        let t = tape.value(pr).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        for row in t.data().chunks(3) {
            assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < PROB_SUM_TOL_F32);
        }
    }
}

#[test]
fn discriminator_rejects_mismatched_batches() {
    let d = Discriminator::<f32>::new(DiscriminatorConfig { side: 16, ..Default::default() }, 2).unwrap();
    let mut tape = Tape::new();
    let p = d.params.bind(&mut tape, false);
    let v = tape.constant(Tensor::zeros(&[2, 1, 16, 16, 16]));
    let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16]));
    assert!(d.forward(&mut tape, &p, v, x).is_err());
}

#[test]
fn discriminator_gradient_matches_finite_differences() {
    let cfg = DiscriminatorConfig {
        side: 8,
        widths: vec![2, 3],
        leaky_slope: 0.2,
    };
    let d = Discriminator::<f64>::new(cfg, 7).unwrap();
    let x = rand_tensor::<f64>(8, &[1, 1, 8, 8]);
    let v = rand_tensor::<f64>(9, &[1, 1, 8, 8, 8]);
    let w = rand_tensor::<f64>(10, &[1, 1, 2, 2, 2]).map(|a| a - 0.5);
    let check = gradient_check(&[v], |t, inp| {
        let p = d.params.bind(t, false);
        let xv = t.constant(x.clone());
        let s = d.forward(t, &p, inp[0], xv)?;
        let wv = t.constant(w.clone());
        let sw = t.mul(s, wv)?;
        t.sum(sw)
    })
    .unwrap();
    assert!(check.passes(GRAD_REL_TOL), "{check:?}");
}

#[test]
fn generator_gradient_matches_finite_differences() {
    let cfg = GeneratorConfig {
        side: 8,
        widths: vec![2, 3],
        out_width: 2,
        leaky_slope: 0.2,
    };
    let g = Generator::<f64>::new(cfg, 11).unwrap();
    let x = rand_tensor::<f64>(12, &[1, 1, 8, 8]);
    let gt = rand_tensor::<f64>(13, &[1, 1, 8, 8, 8]);
    let check = gradient_check(&[x], |t, inp| {
        let p = g.params.bind(t, false);
        let y = g.forward(t, &p, inp[0])?;
        let gv = t.constant(gt.clone());
        loss_reconstruction(t, y, gv)
    })
    .unwrap();
    assert!(check.passes(GRAD_REL_TOL), "{check:?}");
}

#[test]
fn every_generator_parameter_receives_gradient() {
    for seed in 0..10u64 {
        let g = Generator::<f32>::new(gen_cfg(16), seed).unwrap();
        let mut tape = Tape::new();
        let p = g.params.bind(&mut tape, true);
        let x = tape.constant(rand_tensor(seed + 100, &[2, 1, 16, 16]));
        let gt = tape.constant(rand_tensor(seed + 200, &[2, 1, 16, 16, 16]));
        let y = g.forward(&mut tape, &p, x).unwrap();
        let l = loss_reconstruction(&mut tape, y, gt).unwrap();
        let grads = tape.backward(l).unwrap();
        for (name, v) in g.params.names().iter().zip(&p) {
            let gr = grads.get(*v).unwrap();
            assert!(gr.max_abs() > 0.0, "seed {seed}: {name} has zero gradient");
        }
    }
}

#[test]
fn one_adam_step_decreases_reconstruction_loss() {
    let mut g = Generator::<f32>::new(gen_cfg(16), 5).unwrap();
    let x = rand_tensor::<f32>(6, &[2, 1, 16, 16]);
    let gt = rand_tensor::<f32>(7, &[2, 1, 16, 16, 16]);
    let cfg = AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(cfg, &g.params.shapes());
    let loss = |g: &Generator<f32>, train: bool| {
        let mut tape = Tape::new();
        let p = g.params.bind(&mut tape, train);
        let (xv, gv) = (tape.constant(x.clone()), tape.constant(gt.clone()));
        let y = g.forward(&mut tape, &p, xv).unwrap();
        let l = loss_reconstruction(&mut tape, y, gv).unwrap();
        let value = tape.value(l).unwrap().item();
        let grads = train.then(|| {
            let mut gr = tape.backward(l).unwrap();
            p.iter().map(|v| gr.take(*v).unwrap()).collect::<Vec<_>>()
        });
        (value, grads)
    };
    let (before, grads) = loss(&g, true);
    let names = g.params.names().to_vec();
    opt.step(g.params.tensors_mut(), &grads.unwrap(), &names).unwrap();
    let (after, _) = loss(&g, false);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn checkpoint_roundtrip_reproduces_outputs() {
    let g = Generator::<f32>::new(gen_cfg(16), 21).unwrap();
    let d = Discriminator::<f32>::new(DiscriminatorConfig { side: 16, ..Default::default() }, 22).unwrap();
    let mut params = g.params.to_entries("g.");
    params.extend(d.params.to_entries("d."));
    let file = CheckpointFile {
        params,
        optimizer: vec![("g.enc0.w.m".into(), Tensor::full(&[2, 2], 0.25))],
        meta: serde_json::json!({"epoch": 3, "phase": "pretrain"}),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    file.save(&path).unwrap();
    let back = CheckpointFile::load(&path).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.to_bytes(), file.to_bytes());

    let mut g2 = Generator::<f32>::new(gen_cfg(16), 99).unwrap();
    g2.params.load_entries(&back.params, "g.").unwrap();
    let x = crate::volume::XrayImage::new([16, 16], vec![0.3; 256], crate::volume::StyleTag::Drr).unwrap();
    assert_eq!(g.predict(&[&x]).unwrap(), g2.predict(&[&x]).unwrap());
    let mut d2 = Discriminator::<f32>::new(DiscriminatorConfig { side: 16, ..Default::default() }, 0).unwrap();
    d2.params.load_entries(&back.params, "d.").unwrap();
    assert_eq!(d2.params, d.params);
}

#[test]
fn checkpoint_corruption_names_the_field() {
    let file = CheckpointFile {
        params: vec![("w".into(), Tensor::full(&[3], 1.0))],
        optimizer: vec![],
        meta: serde_json::json!({}),
    };
    let bytes = file.to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert!(matches!(CheckpointFile::from_bytes(&bad), Err(Error::Format { field: "magic", .. })));
    assert!(matches!(
        CheckpointFile::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::Format { field: "meta", .. })
    ));
    let mut g = Generator::<f32>::new(gen_cfg(16), 1).unwrap();
    assert!(g.params.load_entries(&file.params, "g.").is_err());
}

#[test]
fn dropout_mask_scales_kept_units() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = dropout_mask::<f64>(&mut rng, 4, 100, 0.5);
    assert!(m.data().iter().all(|&v| v == 0.0 || v == 2.0));
    let kept = m.data().iter().filter(|&&v| v > 0.0).count();
    assert!(kept > 120 && kept < 280);
}
