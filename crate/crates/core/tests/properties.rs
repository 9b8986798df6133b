use proptest::prelude::*;

use deepsic_core::bitstream::{parse, serialize, CompressedBlob, SemanticPayload};
use deepsic_core::density::DensityModel;
use deepsic_core::entropy::{decode_codes, encode_codes, from_bitplanes, to_bitplanes};
use deepsic_core::metrics::{ms_ssim_gray, psnr};
use deepsic_core::networks::{RatePreset, SemanticResult, Variant};
use deepsic_core::quantizer::{code_limit, grid_step, quantize_code, quantize_value, QuantizedFeatureMap};
use deepsic_core::Tensor;

fn feature_map() -> impl Strategy<Value = QuantizedFeatureMap> {
    (2u8..=8, 1usize..5, 1usize..7, 1usize..7).prop_flat_map(|(bits, c, h, w)| {
        let lim = code_limit(bits);
        // Mostly small codes with occasional extremes, like real feature maps.
        let code = prop_oneof![4 => -3i32..=3, 1 => -lim..=lim];
        proptest::collection::vec(code, c * h * w)
            .prop_map(move |codes| QuantizedFeatureMap::new([c, h, w], codes, bits).unwrap())
    })
}

proptest! {
    #[test]
    fn quantizer_rounds_up_within_one_step(v in -4.0f64..=4.0, bits in 2u8..=12) {
        let q = quantize_value(v, bits);
        let step = grid_step(bits);
        prop_assert!(q >= v && q - v < step, "v={v} q={q}");
        prop_assert_eq!(quantize_value(q, bits), q);
    }

    #[test]
    fn quantizer_is_monotone_and_clamped(a in -10.0f64..10.0, b in -10.0f64..10.0, bits in 2u8..=12) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize_code(lo, bits) <= quantize_code(hi, bits));
        prop_assert!(quantize_code(a, bits).abs() <= code_limit(bits));
    }

    #[test]
    fn f32_and_f64_quantizers_agree_on_representable_values(v in -4.0f32..=4.0, bits in 2u8..=12) {
        prop_assert_eq!(quantize_code(v, bits), quantize_code(v as f64, bits));
    }

    #[test]
    fn bitplanes_round_trip(q in feature_map()) {
        let planes = to_bitplanes(&q).unwrap();
        prop_assert_eq!(from_bitplanes(&planes, q.bits()).unwrap(), q);
    }

    #[test]
    fn entropy_coder_round_trips(q in feature_map()) {
        let bytes = encode_codes(&q).unwrap();
        prop_assert_eq!(decode_codes(&bytes, q.shape(), q.bits()).unwrap(), q);
    }

    #[test]
    fn bitstream_round_trips(
        preset in prop::sample::select(RatePreset::ALL.to_vec()),
        cells in (1usize..4, 1usize..4),
        log_c in 0u32..4,
        bits in 2u8..=8,
        classes in 1u16..40,
        crop in (0u16..8, 0u16..8),
        probs in proptest::collection::vec(0.0f64..1.0, 40),
        pre in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let f = preset.strides().iter().product::<usize>();
        let (h, w) = (cells.0 * f, cells.1 * f);
        let c = 1usize << log_c;
        let lim = code_limit(bits) as u64;
        let codes = (0..c * cells.0 * cells.1)
            .map(|i| (seed.wrapping_mul(i as u64 * 2 + 1) % (2 * lim + 1)) as i32 - lim as i32)
            .collect();
        let features = QuantizedFeatureMap::new([c, cells.0, cells.1], codes, bits).unwrap();
        let semantic = pre.then(|| {
            let p = probs[..classes as usize].to_vec();
            SemanticPayload::from_result(&SemanticResult::from_probabilities(p, 5))
        });
        let original = (crop != (0, 0))
            .then(|| ((w as u16).saturating_sub(crop.0).max(1), (h as u16).saturating_sub(crop.1).max(1)));
        let blob = CompressedBlob {
            variant: if pre { Variant::PreSemantic } else { Variant::PostSemantic },
            width: w as u16,
            height: h as u16,
            preset,
            bits,
            classes,
            semantic,
            original,
            features,
        };
        let bytes = serialize(&blob).unwrap();
        prop_assert_eq!(parse(&bytes).unwrap(), blob);
    }

    #[test]
    fn damaged_streams_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..80), flip in any::<usize>()) {
        let _ = parse(&bytes);
        let mut tagged = b"DSIC\x01".to_vec();
        tagged.extend_from_slice(&bytes);
        if !tagged.is_empty() {
            let i = flip % tagged.len();
            tagged[i] ^= 0x10;
        }
        let _ = parse(&tagged);
    }

    #[test]
    fn density_cdf_is_monotone_and_bins_are_probabilities(
        logits in proptest::collection::vec(-5.0f64..5.0, 32),
        a in -5.0f64..5.0,
        b in -5.0f64..5.0,
    ) {
        let m = DensityModel::from_logits(&Tensor::new(&[1, 32], logits).unwrap());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(m.cdf(0, lo) <= m.cdf(0, hi) + 1e-15);
        // Bins inside the clamp range always carry the uniform floor mass.
        let p = m.bin_probability(0, a.clamp(-3.875, 3.875), 0.25);
        prop_assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn psnr_and_ms_ssim_are_symmetric(
        a in proptest::collection::vec(0.0f64..1.0, 3 * 24 * 24),
        b in proptest::collection::vec(0.0f64..1.0, 3 * 24 * 24),
    ) {
        let x = Tensor::new(&[3, 24, 24], a.clone()).unwrap();
        let y = Tensor::new(&[3, 24, 24], b.clone()).unwrap();
        prop_assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
        let g1 = &a[..24 * 24];
        let g2 = &b[..24 * 24];
        let s1 = ms_ssim_gray(g1, g2, 24, 24).unwrap();
        let s2 = ms_ssim_gray(g2, g1, 24, 24).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!((ms_ssim_gray(g1, g1, 24, 24).unwrap() - 1.0).abs() < 1e-9);
    }
}
