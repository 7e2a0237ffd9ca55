use super::*;
use crate::autodiff::{Tape, Tensor};
use crate::layers::Padding;
use crate::rng::{normal_tensor, seeded, uniform_tensor};

fn images(batch: usize, size: usize, seed: u64) -> Tensor {
    uniform_tensor(&mut seeded(seed), &[batch, 1, size, size], 0.0, 1.0)
}

#[test]
fn tabulated_rows() {
    let a = ArchSpec::ellipse();
    assert_eq!(a.encoder.iter().map(|l| l.filters).collect::<Vec<_>>(), [16, 32, 64, 10]);
    assert_eq!(a.generator.iter().map(|l| l.filters).collect::<Vec<_>>(), [64, 32, 16, 1]);
    assert_eq!(a.discriminator.iter().map(|l| l.filters).collect::<Vec<_>>(), [8, 16, 32, 1]);
    assert!(!a.encoder[0].batch_norm && a.encoder[3].batch_norm);
    assert_eq!(a.encoder[3].padding, Padding::Valid);
    assert!(a.discriminator[3].batch_norm);
    assert_eq!(a.discriminator[3].activation, Activation::Sigmoid);
    assert!(a.generator.iter().all(|l| l.kernel == 4 && l.kind == LayerKind::TranspConv2D));

    let b = ArchSpec::small_data();
    assert_eq!(b.encoder.iter().map(|l| l.filters).collect::<Vec<_>>(), [16, 16, 32, 64, 64]);
    assert_eq!(b.generator.iter().map(|l| l.filters).collect::<Vec<_>>(), [64, 32, 32, 16, 1]);
    assert_eq!(b.discriminator.iter().map(|l| l.filters).collect::<Vec<_>>(), [4, 8, 16, 32, 1]);
    assert!(!b.generator[4].batch_norm);
    for arch in [a, b, ArchSpec::small_data_32()] {
        arch.validate().unwrap();
    }
}

#[test]
fn arch_text_round_trip() {
    for arch in [ArchSpec::ellipse(), ArchSpec::small_data(), ArchSpec::small_data_32()] {
        let back = ArchSpec::from_text(&arch.to_text()).unwrap();
        assert_eq!(back, arch);
        assert_eq!(back.hash(), arch.hash());
    }
    assert_ne!(ArchSpec::ellipse().hash(), ArchSpec::small_data().hash());
}

#[test]
fn encoder_shape_algebra() {
    for (arch, channels) in [(ArchSpec::ellipse(), 10), (ArchSpec::small_data(), 64)] {
        let size = arch.image_size;
        let model = HybridModel::new(arch, 1).unwrap();
        let tape = Tape::new();
        let bound = model.encoder.bind(&tape);
        let (out, _) = model
            .encoder
            .forward(&bound, tape.constant(images(1, size, 2)), Mode::Eval)
            .unwrap();
        assert_eq!(out.shape(), vec![1, channels, 1, 1]);
    }
}

#[test]
fn encode_splits_mean_and_log_variance() {
    let model = HybridModel::new(ArchSpec::ellipse(), 3).unwrap();
    let tape = Tape::new();
    let bound = model.encoder.bind(&tape);
    let (d, _) = model.encode(&bound, tape.constant(images(4, 32, 4)), Mode::Train).unwrap();
    assert_eq!(d.mu.shape(), vec![4, 5]);
    assert_eq!(d.log_var.shape(), vec![4, 5]);
    assert!(d.sigma().value().data().iter().all(|&s| s > 0.0));

    let wrong = tape.constant(images(2, 16, 4));
    assert!(model.encode(&bound, wrong, Mode::Eval).is_err());
}

#[test]
fn constant_network_and_determinism() {
    let mut model = HybridModel::new(ArchSpec::ellipse(), 5).unwrap();
    for (_, p) in model.encoder.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let last = model.encoder.blocks.len() - 1;
    model.encoder.blocks[last].bn.as_mut().unwrap().beta = Tensor::full(&[10], 0.7);
    let (mu, _) = model.encode_eval(&images(3, 32, 6)).unwrap();
    assert!(mu.data().iter().all(|&v| v == mu.data()[0]));
    assert_eq!(mu.data()[0], 0.7);

    let model = HybridModel::new(ArchSpec::ellipse(), 5).unwrap();
    let one = images(1, 32, 7);
    let two = Tensor::concat(&[&one, &one]).unwrap();
    let (mu, lv) = model.encode_eval(&two).unwrap();
    assert_eq!(mu.data()[..5], mu.data()[5..]);
    assert_eq!(lv.data()[..5], lv.data()[5..]);
}

#[test]
fn reparametrize_examples() {
    let tape = Tape::new();
    let mu = tape.leaf(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap());
    let log_var = tape.leaf(Tensor::new(vec![1, 3], vec![0.1, -0.3, 0.0]).unwrap());
    let d = LatentDist { mu, log_var };
    let z = reparametrize(&d, tape.constant(Tensor::zeros(&[1, 3]))).unwrap();
    assert_eq!(z.value().data(), mu.value().data());

    let e = Tensor::new(vec![1, 3], vec![0.3, -0.2, 1.1]).unwrap();
    let zero = LatentDist {
        mu: tape.constant(Tensor::zeros(&[1, 3])),
        log_var: tape.constant(Tensor::zeros(&[1, 3])),
    };
    let z = reparametrize(&zero, tape.constant(e.clone())).unwrap();
    assert_eq!(z.value().data(), e.data());

    assert!(reparametrize(&d, tape.constant(Tensor::zeros(&[2, 3]))).is_err());
}

#[test]
fn reparametrize_mean_derivative_is_one() {
    let mu = Tensor::new(vec![2, 2], vec![0.1, -0.4, 1.2, 0.0]).unwrap();
    let lv = Tensor::new(vec![2, 2], vec![0.2, -0.1, 0.5, 0.3]).unwrap();
    let eps = Tensor::new(vec![2, 2], vec![0.7, -1.3, 0.2, 0.9]).unwrap();
    let h = 1e-5;
    let eval = |m: &Tensor| {
        let tape = Tape::new();
        let d = LatentDist {
            mu: tape.constant(m.clone()),
            log_var: tape.constant(lv.clone()),
        };
        (*reparametrize(&d, tape.constant(eps.clone())).unwrap().value()).clone()
    };
    for i in 0..4 {
        let mut up = mu.clone();
        up.data_mut()[i] += h;
        let mut down = mu.clone();
        down.data_mut()[i] -= h;
        let (zu, zd) = (eval(&up), eval(&down));
        let fd = (zu.data()[i] - zd.data()[i]) / (2.0 * h);
        assert!((fd - 1.0).abs() < 1e-8);
    }
}

#[test]
fn noise_statistics_and_seeding() {
    let mut rng = seeded(17);
    let z = sample_noise(&mut rng, 100_000, 1);
    let n = z.numel() as f64;
    let mean = z.sum() / n;
    let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02);
    assert!((var - 1.0).abs() < 0.03);
    assert_eq!(sample_noise(&mut seeded(1), 2, 5), sample_noise(&mut seeded(1), 2, 5));
    assert_ne!(sample_noise(&mut seeded(1), 2, 5), sample_noise(&mut seeded(2), 2, 5));
}

#[test]
fn generator_and_discriminator_shapes() {
    let model = HybridModel::new(ArchSpec::ellipse(), 8).unwrap();
    let z = normal_tensor(&mut seeded(9), &[4, 5], 1.0);
    let x = model.generate_eval(&z).unwrap();
    assert_eq!(x.shape(), &[4, 1, 32, 32]);
    assert!(x.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let s = model.discriminate_eval(&x).unwrap();
    assert_eq!(s.shape(), &[4]);
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(s, model.discriminate_eval(&x).unwrap());
    assert!(model.generate_eval(&Tensor::zeros(&[4, 6])).is_err());

    let model = HybridModel::new(ArchSpec::small_data(), 8).unwrap();
    let x = model.generate_eval(&normal_tensor(&mut seeded(9), &[4, 32], 1.0)).unwrap();
    assert_eq!(x.shape(), &[4, 1, 64, 64]);
    let x = model.generate_eval(&normal_tensor(&mut seeded(9), &[1, 32], 1.0)).unwrap();
    assert_eq!(x.shape(), &[1, 1, 64, 64]);
}

#[test]
fn encode_then_decode_preserves_shape() {
    for arch in [ArchSpec::ellipse(), ArchSpec::small_data(), ArchSpec::small_data_32()] {
        let size = arch.image_size;
        let model = HybridModel::new(arch, 10).unwrap();
        let x = images(2, size, 11);
        assert_eq!(model.reconstruct_eval(&x).unwrap().shape(), x.shape());
    }
}

/// Mean generated intensity as a function of the encoder parameters.
fn pipeline_mean(model: &HybridModel, x: &Tensor, eps: &Tensor) -> f64 {
    let tape = Tape::new();
    let eb = model.encoder.bind_frozen(&tape);
    let gb = model.generator.bind_frozen(&tape);
    let (d, _) = model.encode(&eb, tape.constant(x.clone()), Mode::Train).unwrap();
    let z = reparametrize(&d, tape.constant(eps.clone())).unwrap();
    let (g, _) = model.generate(&gb, z, Mode::Train).unwrap();
    g.mean().unwrap().item().unwrap()
}

#[test]
fn end_to_end_encoder_gradients() {
    let model = HybridModel::new(ArchSpec::ellipse(), 12).unwrap();
    let x = images(3, 32, 13);
    let eps = normal_tensor(&mut seeded(14), &[3, 5], 1.0);

    let tape = Tape::new();
    let eb = model.encoder.bind(&tape);
    let gb = model.generator.bind_frozen(&tape);
    let (d, _) = model.encode(&eb, tape.constant(x.clone()), Mode::Train).unwrap();
    let z = reparametrize(&d, tape.constant(eps.clone())).unwrap();
    let (g, _) = model.generate(&gb, z, Mode::Train).unwrap();
    let loss = g.mean().unwrap();
    let grads = eb.grads(&tape.backward(loss).unwrap());
    assert!(grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));

    // Spot-check the largest entries of several parameter tensors. The step is
    // smaller than the primitive checks use so probes do not straddle a
    // leaky-ReLU kink somewhere in the 8-layer pipeline.
    let h = 1e-6;
    let mut checked = 0;
    for (pi, g) in grads.iter().enumerate().step_by(2).take(6) {
        let (idx, &analytic) = g
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        let perturbed = |delta: f64| {
            let mut m = model.clone();
            let mut params = m.encoder.params_mut();
            params[pi].1.data_mut()[idx] += delta;
            drop(params);
            pipeline_mean(&m, &x, &eps)
        };
        let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
        let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs());
        assert!(rel <= 1e-4, "param {pi}[{idx}]: analytic {analytic}, numeric {numeric}");
        checked += 1;
    }
    assert!(checked >= 5);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = HybridModel::new(ArchSpec::ellipse(), 15).unwrap();
    // Disturb running statistics so they are part of what is compared.
    for b in &mut model.generator.blocks {
        if let Some(bn) = &mut b.bn {
            bn.running_mean.data_mut().iter_mut().for_each(|v| *v = 0.125);
        }
    }
    let bytes = checkpoint::to_bytes(&model);
    assert_eq!(&bytes[..4], b"DVGN");
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, model);
    let z = normal_tensor(&mut seeded(16), &[2, 5], 1.0);
    let a = model.generate_eval(&z).unwrap();
    let b = back.generate_eval(&z).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = HybridModel::new(ArchSpec::ellipse(), 18).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    let err = checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(err.to_string().contains("version 1"), "{err}");
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version 9"));
    assert!(checkpoint::from_bytes(b"NOPE").is_err());
}
