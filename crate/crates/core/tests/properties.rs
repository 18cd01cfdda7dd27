use latentflow::autodiff::{Bound, Conv1dOpts, GradCheck, Mode, ParamStore, Tape, Tensor, Var};
use latentflow::flow::{interpolate, target_velocity};
use latentflow::latent::{kl_divergence, sample_reparam_var, DiagonalGaussianSeq, EncoderConfig, PosteriorEncoder};
use latentflow::losses::{adv_disc, adv_gen, feature_matching, mel_recon};
use latentflow::pipeline::{Checkpoint, RunConfig};
use latentflow::signal::{f0_rmse, mcd, MelSpectrogram, MelTransform};
use latentflow::vector_field::VectorField;
use latentflow::wavegen::{Decoder, Discriminators};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.5f64..1.5, n)
}

const OPS: [&str; 20] = [
    "add", "sub", "mul", "scale", "matmul", "conv1d", "conv1d_depthwise", "conv_transpose1d",
    "leaky_relu", "tanh", "exp", "ln", "square", "abs", "mean", "sum", "concat_rows", "slice_cols",
    "dropout", "sigmoid",
];

/// `Σ r ⊙ op(inputs)` for a fixed random `r`.
fn apply_op(tape: &mut Tape, p: &Bound, op: &str, dilation: usize, proj: &[f64]) -> latentflow::Result<Var> {
    let (a, b) = (p.get("a")?, p.get("b")?);
    let y = match op {
        "add" => tape.add(a, b)?,
        "sub" => tape.sub(a, b)?,
        "mul" => tape.mul(a, b)?,
        "scale" => tape.scale(a, -1.7)?,
        "matmul" => tape.matmul(p.get("m")?, a)?,
        "conv1d" => tape.conv1d(a, p.get("w")?, Some(p.get("bias")?), Conv1dOpts { dilation, ..Default::default() })?,
        "conv1d_depthwise" => {
            let c = tape.value(a).rows();
            tape.conv1d(a, p.get("wd")?, None, Conv1dOpts { dilation, groups: c, ..Default::default() })?
        }
        "conv_transpose1d" => tape.conv_transpose1d(a, p.get("wt")?, Some(p.get("bt")?), 2, 1)?,
        // kinked ops act on `k`, which stays away from 0
        "leaky_relu" => tape.leaky_relu(p.get("k")?, 0.1)?,
        "abs" => tape.abs(p.get("k")?)?,
        "tanh" => tape.tanh(a)?,
        "sigmoid" => tape.sigmoid(a)?,
        "exp" => tape.exp(a)?,
        "ln" => {
            let k = p.get("k")?;
            let k2 = tape.square(k)?;
            tape.ln(k2)?
        }
        "square" => tape.square(a)?,
        "mean" => tape.mean(a)?,
        "sum" => tape.sum(a)?,
        "concat_rows" => tape.concat_rows(&[a, b])?,
        "slice_cols" => {
            let n = tape.value(a).cols();
            tape.slice_cols(a, 1, n)?
        }
        "dropout" => tape.dropout(a, 0.4)?,
        other => unreachable!("{other}"),
    };
    let n = tape.value(y).len();
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(tensor(&shape, proj.iter().copied().cycle().take(n).collect()));
    let y = tape.mul(y, r)?;
    tape.sum(y)
}

fn op_store(c: usize, len: usize, data: &[f64]) -> ParamStore {
    let mut it = data.iter().copied().cycle();
    let mut take = |shape: &[usize]| tensor(shape, (0..shape.iter().product()).map(|_| it.next().unwrap()).collect());
    let mut s = ParamStore::new();
    s.insert("a", take(&[c, len]), true).unwrap();
    s.insert("b", take(&[c, len]), true).unwrap();
    s.insert("m", take(&[3, c]), true).unwrap();
    s.insert("w", take(&[3, c, 3]), true).unwrap();
    s.insert("bias", take(&[3]), true).unwrap();
    s.insert("wd", take(&[c, 1, 3]), true).unwrap();
    s.insert("wt", take(&[c, 2, 4]), true).unwrap();
    s.insert("bt", take(&[2]), true).unwrap();
    let k = take(&[c, len]).map(|v| v.signum() * (0.2 + v.abs()));
    s.insert("k", k, true).unwrap();
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn op_gradients_match_finite_differences(
        op in 0..OPS.len(),
        c in 1usize..4,
        len in 2usize..9,
        dilation in 1usize..3,
        data in values(61),
        proj in values(7),
        seed in any::<u64>(),
    ) {
        let s = op_store(c, len, &data);
        let gc = GradCheck { mode: Mode::Train, seed: Some(seed), ..GradCheck::default() };
        let r = gc.run(&s, &[], |t, p| apply_op(t, p, OPS[op], dilation, &proj)).unwrap();
        prop_assert!(r.max_rel_error <= 1e-4, "{}: {:?}", OPS[op], r);
    }

    #[test]
    fn replay_is_bit_identical(op in 0..OPS.len(), data in values(61), seed in any::<u64>()) {
        let s = op_store(2, 5, &data);
        let run = || {
            let mut t = Tape::new(Mode::Train, seed);
            let p = s.bind(&mut t);
            let l = apply_op(&mut t, &p, OPS[op], 1, &[0.3, -0.7]).unwrap();
            let g = t.backward(l).unwrap();
            let g: std::collections::BTreeMap<_, _> = p.collect(&g).into_iter().collect();
            (t.item(l).unwrap().to_bits(), g)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn inference_dropout_is_identity(data in values(12), p in 0.0f64..0.9) {
        let mut t = Tape::inference();
        let x = t.constant(tensor(&[3, 4], data.clone()));
        let y = t.dropout(x, p).unwrap();
        prop_assert_eq!(t.value(y).data(), &data[..]);
    }

    #[test]
    fn kl_is_nonnegative(m in values(8), l in values(8), m2 in values(8), l2 in values(8)) {
        let q = DiagonalGaussianSeq::new(tensor(&[2, 4], m.clone()), tensor(&[2, 4], l.clone())).unwrap();
        let p = DiagonalGaussianSeq::new(tensor(&[2, 4], m2), tensor(&[2, 4], l2)).unwrap();
        prop_assert!(kl_divergence(&q, &p).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&q, &q).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn reparam_gradients(m in values(6), l in values(6), eps in values(6), temp in 0.0f64..1.5) {
        let eps = tensor(&[2, 3], eps);
        let mut s = ParamStore::new();
        s.insert("m", tensor(&[2, 3], m), true).unwrap();
        s.insert("l", tensor(&[2, 3], l), true).unwrap();
        let mut t = Tape::inference();
        let p = s.bind(&mut t);
        let z = sample_reparam_var(&mut t, p.get("m").unwrap(), p.get("l").unwrap(), &eps, temp).unwrap();
        let loss = t.sum(z).unwrap();
        let g = p.collect(&t.backward(loss).unwrap());
        prop_assert!(g["m"].data().iter().all(|&v| v == 1.0));
        let r = GradCheck::default()
            .run(&s, &[], |t, p| {
                let z = sample_reparam_var(t, p.get("m")?, p.get("l")?, &eps, temp)?;
                let z = t.square(z)?;
                t.sum(z)
            })
            .unwrap();
        prop_assert!(r.max_rel_error <= 1e-4, "{:?}", r);
    }

    #[test]
    fn posterior_keeps_frame_count(frames in 1usize..40) {
        let cfg = EncoderConfig::default();
        let pe = PosteriorEncoder::new(&cfg).unwrap();
        let mut s = ParamStore::new();
        pe.init(&mut s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = pe.encode(&s, &Tensor::filled(&[cfg.mel_bands, frames], -2.0)).unwrap();
        prop_assert_eq!(g.frames(), frames);
    }

    #[test]
    fn field_is_deterministic_in_inference(z in values(4 * 6), t in 0.0f64..1.0) {
        let cfg = RunConfig::default();
        let c = cfg.latent.latent_channels;
        let vf = VectorField::new(&cfg.vector_field, c).unwrap();
        let s = vf.init(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let z = tensor(&[c, 24 / c], z[..24].to_vec());
        let a = vf.eval(&s, &z, &[t], Some(&z), z.cols()).unwrap();
        let b = vf.eval(&s, &z, &[t], Some(&z), z.cols()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn interpolation_is_affine_with_exact_velocity(zp in values(6), zq in values(6), alpha in -3.0f64..3.0, t in 0.01f64..0.99) {
        let (zp, zq) = (tensor(&[2, 3], zp), tensor(&[2, 3], zq));
        let lhs = interpolate(&zp.map(|v| alpha * v), &zq.map(|v| alpha * v), t).unwrap();
        let rhs = interpolate(&zp, &zq, t).unwrap().map(|v| alpha * v);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let h = 1e-4;
        let up = interpolate(&zp, &zq, t + h).unwrap();
        let down = interpolate(&zp, &zq, t - h).unwrap();
        let v = target_velocity(&zp, &zq).unwrap();
        for i in 0..6 {
            let fd = (up.data()[i] - down.data()[i]) / (2.0 * h);
            prop_assert!((fd - v.data()[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn mcd_is_symmetric_and_nonnegative(a in values(24 * 3), b in values(24 * 3)) {
        let x = MelSpectrogram::new(tensor(&[24, 3], a)).unwrap();
        let y = MelSpectrogram::new(tensor(&[24, 3], b)).unwrap();
        let d = mcd(&x, &y, 13).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - mcd(&y, &x, 13).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(mcd(&x, &x, 13).unwrap(), 0.0);
    }

    #[test]
    fn f0_rmse_ignores_global_retuning(
        r in proptest::collection::vec(80.0f64..800.0, 10),
        s in proptest::collection::vec(80.0f64..800.0, 10),
        ratio in 0.5f64..2.0,
    ) {
        let v = vec![true; 10];
        let a = f0_rmse(&r, &v, &s, &v).unwrap().cents;
        let rr: Vec<f64> = r.iter().map(|x| x * ratio).collect();
        let ss: Vec<f64> = s.iter().map(|x| x * ratio).collect();
        prop_assert!((a - f0_rmse(&rr, &v, &ss, &v).unwrap().cents).abs() <= 1e-6);
    }

    #[test]
    fn checkpoints_survive_repeated_round_trips(
        tensors in proptest::collection::btree_map("[a-z.]{1,8}", (1usize..4, 1usize..4, any::<u64>()), 1..5),
        fp in any::<u64>(),
    ) {
        let mut s = ParamStore::new();
        for (name, (r, c, bits)) in &tensors {
            let data = (0..r * c).map(|k| f64::from_bits(bits.rotate_left(k as u32) & !(0x7ffu64 << 52) | (0x3ffu64 << 52))).collect();
            s.insert(name.clone(), tensor(&[*r, *c], data), true).unwrap();
        }
        let ck = Checkpoint::from_stores(fp, &[&s]);
        let once = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let twice = Checkpoint::from_bytes(&once.to_bytes()).unwrap();
        prop_assert_eq!(&once, &ck);
        prop_assert_eq!(twice.to_bytes(), ck.to_bytes());
    }
}

/// After one update, every decoder and discriminator parameter gets a nonzero
/// gradient from the adversarial, feature-matching and mel terms.
#[test]
fn no_dead_branches_after_one_step() {
    let cfg = RunConfig::default();
    let c = cfg.latent.latent_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dec = Decoder::new(&cfg.decoder, c, cfg.mel.sample_rate).unwrap();
    let discs = Discriminators::new(&cfg.discriminator).unwrap();
    let mel = MelTransform::new(&cfg.mel).unwrap();
    let mut gen = ParamStore::new();
    dec.init(&mut gen, &mut rng).unwrap();
    let mut disc = discs.init(&mut rng).unwrap();
    let frames = 24;
    let z = Tensor::new(vec![c, frames], (0..c * frames).map(|k| ((k * 37 % 11) as f64 - 5.0) / 5.0).collect()).unwrap();
    let lf0: Vec<f64> = (0..frames).map(|j| (220.0 + 3.0 * j as f64).ln()).collect();
    let real = Tensor::row((0..frames * cfg.mel.hop).map(|n| 0.5 * (n as f64 * 0.17).sin() + 0.2 * (n as f64 * 0.05).cos()).collect()).unwrap();

    let grads = |gen: &ParamStore, disc: &ParamStore| {
        let mut t = Tape::inference();
        let gp = gen.bind(&mut t);
        let dp = disc.bind(&mut t);
        let zv = t.constant(z.clone());
        let y_hat = dec.forward(&mut t, &gp, zv, &lf0).unwrap();
        let y = t.constant(real.clone());
        let fake_d = t.detach(y_hat);
        let r = discs.forward(&mut t, &dp, y).unwrap();
        let f = discs.forward(&mut t, &dp, fake_d).unwrap();
        let ld = adv_disc(&mut t, &r.iter().map(|o| o.score).collect::<Vec<_>>(), &f.iter().map(|o| o.score).collect::<Vec<_>>()).unwrap();
        let gd = dp.collect(&t.backward(ld).unwrap());
        let fg = discs.forward(&mut t, &dp, y_hat).unwrap();
        let adv = adv_gen(&mut t, &fg.iter().map(|o| o.score).collect::<Vec<_>>()).unwrap();
        let fm = feature_matching(
            &mut t,
            &r.iter().map(|o| o.features.clone()).collect::<Vec<_>>(),
            &fg.iter().map(|o| o.features.clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        let mr = mel_recon(&mut t, &mel, y, y_hat).unwrap();
        let lg = t.add(adv, fm).unwrap();
        let lg = t.add(lg, mr).unwrap();
        let gg = gp.collect(&t.backward(lg).unwrap());
        (gg, gd)
    };
    let (gg, gd) = grads(&gen, &disc);
    gen.adam_step(&gg, &cfg.optimizer.generator).unwrap();
    disc.adam_step(&gd, &cfg.optimizer.discriminator).unwrap();
    let (gg, gd) = grads(&gen, &disc);
    for (name, g) in gg.iter().chain(&gd) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
    assert_eq!(gg.len(), gen.len());
    assert_eq!(gd.len(), disc.len());
}

