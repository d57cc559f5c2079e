use mftrain::cli::checkpoint::Checkpoint;
use mftrain::energy::{builtin_profiles, iteration_energy, OpCostTable, WorkloadSpec};
use mftrain::mfmac::{mf_dot, reference_dot, AccumulatorMode, MacEngine, OpCensus};
use mftrain::nn::{LayerSpec, Network, NetworkSpec, PassContext, Precision, Tensor, TrainerState};
use mftrain::potnum::{dequantize_scalar, pot_mul, quantize_scalar, BitWidth, PotCode};
use mftrain::quantizer::{als_potq, ratio_clip, weight_bias_correction, ClipParam, QuantBlock, ZERO_EXP};
use proptest::prelude::*;

const SQRT2_M1: f64 = std::f64::consts::SQRT_2 - 1.0;

fn width() -> impl Strategy<Value = BitWidth> {
    (3u8..=6).prop_map(|b| BitWidth::new(b).unwrap())
}

fn block(bits: BitWidth, len: usize) -> impl Strategy<Value = QuantBlock> {
    let emax = bits.emax();
    (
        prop::collection::vec(prop_oneof![1 => Just(ZERO_EXP), 7 => (-emax..=emax).prop_map(|e| e as i8)], len),
        prop::collection::vec(any::<bool>(), len),
        -40i16..40,
    )
        .prop_map(move |(exps, signs, beta)| QuantBlock::new(exps, signs, Some(beta), bits, vec![len]).unwrap())
}

fn block_pair() -> impl Strategy<Value = (QuantBlock, QuantBlock)> {
    (1usize..300, prop::bool::ANY, prop::bool::ANY).prop_flat_map(|(len, a6, b6)| {
        let w = |six: bool| if six { BitWidth::B6 } else { BitWidth::B5 };
        (block(w(a6), len), block(w(b6), len))
    })
}

proptest! {
    #[test]
    fn codec_is_bijective(w in width(), pattern in 0u8..64) {
        prop_assume!(u16::from(pattern) < 1 << w.bits());
        let code = PotCode::from_bits(pattern, w).unwrap();
        prop_assert_eq!(PotCode::from_bits(code.to_bits(), w).unwrap(), code);
        prop_assert_eq!(quantize_scalar(dequantize_scalar(code), w).unwrap(), code);
    }

    #[test]
    fn products_are_exact(w in width(), a in 0u8..64, b in 0u8..64) {
        let n = 1u8 << w.bits();
        let (a, b) = (PotCode::from_bits(a % n, w).unwrap(), PotCode::from_bits(b % n, w).unwrap());
        prop_assert_eq!(pot_mul(a, b).value(), dequantize_scalar(a) * dequantize_scalar(b));
    }

    #[test]
    fn relative_error_bound(w in width(), t in 0.0f64..1.0, negative in any::<bool>()) {
        let emax = f64::from(w.emax());
        let log = -emax - 0.5 + t * (2.0 * emax + 1.0);
        let f = if negative { -log.exp2() } else { log.exp2() };
        let q = dequantize_scalar(quantize_scalar(f, w).unwrap());
        prop_assert!(((q - f) / f).abs() <= SQRT2_M1);
    }

    #[test]
    fn quantization_is_monotone(w in width(), a in -300.0f64..300.0, b in -300.0f64..300.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let q = |f: f64| dequantize_scalar(quantize_scalar(f, w).unwrap());
        prop_assert!(q(lo) <= q(hi));
    }

    #[test]
    fn quantization_is_sign_symmetric(w in width(), f in -1e6f64..1e6) {
        let q = |f: f64| dequantize_scalar(quantize_scalar(f, w).unwrap());
        prop_assert_eq!(q(-f), -q(f));
    }

    #[test]
    fn scale_equivariance(values in prop::collection::vec(-100.0f64..100.0, 1..64), k in -20i32..20) {
        let a = als_potq(&values, &[values.len()], BitWidth::B5).unwrap();
        let scaled: Vec<f64> = values.iter().map(|v| v * 2f64.powi(k)).collect();
        let b = als_potq(&scaled, &[values.len()], BitWidth::B5).unwrap();
        prop_assert_eq!(a.exps(), b.exps());
        prop_assert_eq!(a.signs(), b.signs());
        if let (Some(x), Some(y)) = (a.beta(), b.beta()) {
            prop_assert_eq!(i32::from(y) - i32::from(x), k);
        }
    }

    #[test]
    fn pot_tensors_quantize_exactly(exps in prop::collection::vec(-7i32..=7, 1..64), signs in prop::collection::vec(any::<bool>(), 64), shift in -10i32..10) {
        let values: Vec<f64> = exps.iter().zip(&signs).map(|(e, s)| {
            let v = 2f64.powi(e + shift);
            if *s { -v } else { v }
        }).collect();
        let q = als_potq(&values, &[values.len()], BitWidth::B5).unwrap();
        prop_assert_eq!(q.dequantize(), values);
    }

    #[test]
    fn block_error_bound(values in prop::collection::vec(-1e3f64..1e3, 1..128)) {
        let q = als_potq(&values, &[values.len()], BitWidth::B5).unwrap();
        for (x, y) in values.iter().zip(q.dequantize()) {
            if y != 0.0 {
                prop_assert!(((x - y) / x).abs() <= SQRT2_M1);
            }
        }
    }

    #[test]
    fn wbc_centres_and_clip_bounds(values in prop::collection::vec(-50.0f64..50.0, 1..128), gamma in 0.01f64..=1.0) {
        let c = weight_bias_correction(&values).unwrap();
        let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!((c.iter().sum::<f64>() / c.len() as f64).abs() <= 1e-12 * scale);
        let (clipped, mask) = ratio_clip(&values, ClipParam::new(gamma).unwrap()).unwrap();
        let bound = mask.max_abs() * gamma;
        for (i, v) in clipped.iter().enumerate() {
            prop_assert!(v.abs() <= bound);
            prop_assert_eq!(mask.is_clipped(i), values[i].abs() > bound);
        }
    }

    #[test]
    fn mf_dot_matches_oracle_and_commutes((a, b) in block_pair()) {
        let d = mf_dot(&a, &b).unwrap();
        prop_assert_eq!(d.to_bits(), reference_dot(&a.dequantize(), &b.dequantize()).unwrap().to_bits());
        prop_assert_eq!(d.to_bits(), mf_dot(&b, &a).unwrap().to_bits());
    }

    #[test]
    fn mf_mac_never_multiplies((a, b) in block_pair(), strict in any::<bool>()) {
        let mode = if strict { AccumulatorMode::Strict32 } else { AccumulatorMode::Wide };
        let engine = MacEngine::new(mode);
        let wide = mf_dot(&a, &b).unwrap();
        let got = engine.dot(&a, &b).unwrap();
        let c = engine.census();
        prop_assert_eq!(c.multiplies, 0);
        prop_assert_eq!(c.mac_slots, a.len() as u64);
        let offset = a.bits().emax() + b.bits().emax();
        let mut z = 0i128;
        let mut overflows = false;
        for i in 0..a.len() {
            let (ea, eb) = (a.exps()[i], b.exps()[i]);
            if ea == ZERO_EXP || eb == ZERO_EXP {
                continue;
            }
            let term = 1i128 << (i32::from(ea) + i32::from(eb) + offset);
            z += if a.signs()[i] ^ b.signs()[i] { -term } else { term };
            overflows |= term > i128::from(i32::MAX) || z > i128::from(i32::MAX) || z < i128::from(i32::MIN);
        }
        if strict {
            prop_assert_eq!(c.saturations > 0, overflows);
        }
        if c.saturations == 0 {
            prop_assert_eq!(got.to_bits(), wide.to_bits());
        }
    }

    #[test]
    fn energy_is_linear_in_macs(macs in 1e6f64..1e13, factor in 1.0f64..1000.0) {
        let table = OpCostTable::default();
        let w1 = WorkloadSpec::new("a", macs).unwrap();
        let w2 = WorkloadSpec::new("b", macs * factor).unwrap();
        for p in builtin_profiles() {
            let (e1, e2) = (iteration_energy(&p, &w1, &table).unwrap(), iteration_energy(&p, &w2, &table).unwrap());
            prop_assert!((e2.total - factor * e1.total).abs() <= 1e-9 * e2.total);
            prop_assert!((e2.overhead - factor * e1.overhead).abs() <= 1e-9 * e2.overhead.max(1e-30));
        }
    }

    #[test]
    fn raising_a_cost_never_lowers_energy(op in 0usize..15, bump in 0.0f64..10.0) {
        let base = OpCostTable::default();
        let (name, cost) = base.iter().nth(op).map(|(n, c)| (n.to_string(), c)).unwrap();
        let mut raised = base.clone();
        raised.set(&name, cost + bump).unwrap();
        let w = WorkloadSpec::new("w", 1e9).unwrap();
        for p in builtin_profiles() {
            let (lo, hi) = (iteration_energy(&p, &w, &base).unwrap(), iteration_energy(&p, &w, &raised).unwrap());
            prop_assert!(hi.total >= lo.total);
            prop_assert!(hi.total_with_overhead() + hi.side >= lo.total_with_overhead() + lo.side);
        }
    }

    #[test]
    fn checkpoint_round_trip(
        weights in prop::collection::vec(prop::collection::vec(any::<f64>(), 0..20), 1..4),
        seed in any::<[u8; 32]>(),
        word_pos in any::<u64>(),
        step in any::<u64>(),
        census in any::<[u64; 3]>(),
    ) {
        let ck = Checkpoint {
            state: TrainerState {
                step,
                epoch: 3,
                rng_seed: seed,
                rng_stream: 9,
                rng_word_pos: u128::from(word_pos) << 4,
                velocity: weights.iter().map(|w| w.iter().map(|x| x / 2.0).collect()).collect(),
                gammas: vec![0.5; weights.len()],
                census: OpCensus { mac_slots: census[0], xors: census[1], saturations: census[2], ..OpCensus::default() },
                weights,
            },
            quantized: Vec::new(),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

fn pot_layer_net(inputs: usize, outputs: usize) -> NetworkSpec {
    NetworkSpec {
        layers: vec![LayerSpec::Linear { outputs, bits: None, gamma: None }],
        ..NetworkSpec::mlp(&[inputs, outputs])
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Zero-mean power-of-two weights and power-of-two inputs survive
    /// quantization unchanged, so both precisions agree exactly.
    #[test]
    fn ste_consistency_on_representable_values(
        half in prop::collection::vec((-6i32..=6, any::<bool>()), 6),
        inputs in prop::collection::vec((-6i32..=6, any::<bool>()), 8),
    ) {
        let pot = |(e, s): &(i32, bool)| if *s { -2f64.powi(*e) } else { 2f64.powi(*e) };
        let mut w: Vec<f64> = half.iter().map(pot).collect();
        w.extend(half.iter().map(|c| -pot(c)));
        let spec = pot_layer_net(4, 3);
        let x = Tensor::new(inputs.iter().map(pot).collect(), vec![2, 4]).unwrap();
        let run = |precision| {
            let mut net = Network::from_spec(&spec).unwrap();
            net.params_mut()[0].weight.data.clone_from(&w);
            let engine = MacEngine::default();
            let mut ctx = PassContext::new(&engine, precision);
            let out = net.forward(x.clone(), &mut ctx).unwrap();
            (out.data, net.params()[0].weight.data.clone())
        };
        let (q, wq) = run(Precision::Quantized);
        let (f, _) = run(Precision::Full);
        prop_assert_eq!(q, f);
        prop_assert_eq!(wq, w);
    }

    #[test]
    fn forward_is_pure(x in prop::collection::vec(-2.0f64..2.0, 12), seed in any::<u64>()) {
        use rand::SeedableRng;
        let spec = NetworkSpec::mlp(&[4, 5, 3]);
        let mut net = Network::from_spec(&spec).unwrap();
        mftrain::nn::init_weights(&mut net, Default::default(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let before: Vec<Vec<f64>> = net.params().iter().map(|p| p.weight.data.clone()).collect();
        let input = Tensor::new(x, vec![3, 4]).unwrap();
        let engine = MacEngine::default();
        let mut a = net.clone();
        let mut b = net.clone();
        let oa = a.forward(input.clone(), &mut PassContext::new(&engine, Precision::Quantized)).unwrap();
        let ob = b.forward(input, &mut PassContext::new(&engine, Precision::Quantized)).unwrap();
        prop_assert_eq!(oa.data, ob.data);
        for (pa, pb) in a.params().iter().zip(b.params()) {
            prop_assert_eq!(pa.cached_weights(), pb.cached_weights());
            prop_assert_eq!(pa.cached_clip_mask(), pb.cached_clip_mask());
        }
        let after: Vec<Vec<f64>> = a.params().iter().map(|p| p.weight.data.clone()).collect();
        prop_assert_eq!(before, after);
    }
}
