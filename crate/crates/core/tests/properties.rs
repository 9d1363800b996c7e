use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mtfatt::dataio::{sum_stems, Checkpoint};
use mtfatt::metrics::sdr;
use mtfatt::model::{ModelConfig, SeparationModel, Variant};
use mtfatt::signal::{pack_subbands, ComplexSpectrogram, stft, unpack_mask, StftConfig};
use mtfatt::training::{augment, AugmentConfig, Example};
use mtfatt::{Tape, Tensor};

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

fn tensor32(shape: &'static [usize]) -> impl Strategy<Value = Tensor<f32>> {
    tensor(shape, -1.0, 1.0).prop_map(|t| t.cast::<f32>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stft_is_linear(x in tensor(&[96, 2], -1.0, 1.0), y in tensor(&[96, 2], -1.0, 1.0), a in -3.0f64..3.0) {
        let cfg = StftConfig::new(32, 8, 8000).unwrap();
        let combo = x.zip_map(&y, |p, q| a * p + q).unwrap();
        let (sx, sy, sc) = (stft(&x, cfg).unwrap(), stft(&y, cfg).unwrap(), stft(&combo, cfg).unwrap());
        for (plane_c, (plane_x, plane_y)) in [(&sc.re, (&sx.re, &sy.re)), (&sc.im, (&sx.im, &sy.im))] {
            for ((c, p), q) in plane_c.data().iter().zip(plane_x.data()).zip(plane_y.data()) {
                prop_assert!((c - (a * p + q)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pack_is_a_bijection(re in tensor(&[3, 16, 2], -5.0, 5.0), im in tensor(&[3, 16, 2], -5.0, 5.0), k in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let cfg = StftConfig::new(32, 8, 8000).unwrap();
        let spec = ComplexSpectrogram::new(re, im, cfg).unwrap();
        let packed = pack_subbands(&spec, k).unwrap();
        prop_assert_eq!(packed.data.shape(), &[3, 16 / k, 4 * k][..]);
        prop_assert_eq!(unpack_mask(&packed, cfg).unwrap(), spec);
    }

    #[test]
    fn softmax_rows_are_stochastic(x in tensor(&[5, 7], -30.0, 30.0), scale in 0.01f64..4.0) {
        let tape = Tape::inference();
        let p = tape.constant(x).softmax_rows(scale).unwrap();
        for row in p.value().data().chunks(7) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn augmented_mixture_is_stem_sum(
        stems in prop::collection::vec(tensor32(&[16, 2]), 16),
        seed in any::<u64>(),
        swap in 0.0f64..1.0,
        remix in 0.0f64..1.0,
    ) {
        let batch: Vec<Example> = stems
            .chunks(4)
            .map(|c| Example::from_stems([c[0].clone(), c[1].clone(), c[2].clone(), c[3].clone()]).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AugmentConfig { swap_prob: swap, remix_prob: remix };
        for ex in augment(&batch, &cfg, &mut rng).unwrap() {
            prop_assert_eq!(&ex.mixture, &sum_stems(&ex.stems).unwrap());
        }
        prop_assert_eq!(augment(&batch, &AugmentConfig::NONE, &mut rng).unwrap(), batch);
    }

    #[test]
    fn sdr_is_scale_invariant(s in tensor32(&[64, 2]), e in tensor32(&[64, 2]), c in 0.1f32..10.0) {
        let est = s.zip_map(&e, |a, b| a + 0.1 * b).unwrap();
        let base = sdr(&s, &est).unwrap();
        let scaled = sdr(&s.map(|v| c * v), &est.map(|v| c * v)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn mask_is_bounded(seed in any::<u64>(), gain in 0.01f32..20.0) {
        let model = SeparationModel::<f32>::build(ModelConfig { variant: Variant::NoAtt, seed, ..ModelConfig::desk_scale() }).unwrap();
        let n = model.config().segment_samples();
        let mix = mtfatt::reference::probe(&[n, 2], seed).cast::<f32>().map(|v| gain * v);
        let (_, mask) = model.forward(&mix).unwrap();
        prop_assert!(mask.re.data().iter().chain(mask.im.data()).all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), cut in 0usize..1000) {
        let model = SeparationModel::<f32>::build(ModelConfig { variant: Variant::TAtt, seed, ..ModelConfig::desk_scale() }).unwrap();
        let ckpt = Checkpoint::from_store(model.store(), model.config());
        let bytes = ckpt.to_bytes();
        prop_assert_eq!(&Checkpoint::from_bytes(&bytes).unwrap(), &ckpt);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
}
