use cebra_core::encoder::{ArchSpec, Architecture, EncoderModel};
use cebra_core::tensor::{forward_chain, grad_check, layer_forward, GradTape, LayerSpec, Tensor};
use cebra_core::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch() -> impl Strategy<Value = Architecture> {
    prop_oneof![Just(Architecture::Rf1), Just(Architecture::Rf10), Just(Architecture::Rf40)]
}

/// A short chain: one parameterized entry layer, then a residual block and an
/// optional normalization.
fn chain() -> impl Strategy<Value = Vec<LayerSpec>> {
    (0usize..3, 1usize..=4, 1usize..=5, 1usize..=4, 1usize..=3, any::<bool>()).prop_map(
        |(entry, c, h, k, stride, normalize)| {
            let mut layers = vec![match entry {
                0 => LayerSpec::linear(c, h),
                1 => LayerSpec::conv1d(c, h, k),
                _ => LayerSpec::downsample_conv(c, h, k, stride),
            }];
            layers.extend([
                LayerSpec::gelu(h),
                LayerSpec::conv1d(h, h, 1),
                LayerSpec::gelu(h),
                LayerSpec::skip_add(h, 2),
            ]);
            if normalize {
                layers.push(LayerSpec::l2_normalize(h));
            }
            layers
        },
    )
}

/// Multiples of `2^-bits` in `[-range, range]`: products and short sums of
/// these are exact in f64.
fn quantized(rng: &mut ChaCha8Rng, bits: i32, range: f64) -> f64 {
    let scale = 2f64.powi(bits);
    (rng.random_range(-range..=range) * scale).round() / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l2_normalize_gives_unit_rows(
        dim in 1usize..=16,
        batch in 1usize..=4,
        exponent in -100i32..=100,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 10f64.powi(exponent);
        let mut data: Vec<f64> = (0..batch * dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        for b in 0..batch {
            data[b * dim] = scale; // keep every row nonzero
        }
        let spec = LayerSpec::l2_normalize(dim);
        let mut tape = GradTape::new();
        let y = layer_forward(&spec, &[], Tensor::new(vec![batch, dim, 1], data).unwrap(), &mut tape).unwrap();
        for b in 0..batch {
            let norm = y.data()[b * dim..(b + 1) * dim].iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12, "norm {}", norm);
        }
    }

    #[test]
    fn centered_identity_kernel_copies_the_valid_region(
        channels in 1usize..=4,
        half in 0usize..=3,
        extra in 0usize..=20,
        seed in any::<u64>(),
    ) {
        let k = 2 * half + 1;
        let len = k + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..channels * len).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut w = vec![0.0; channels * channels * k];
        for c in 0..channels {
            w[(c * channels + c) * k + half] = 1.0;
        }
        let params = vec![
            Tensor::new(vec![channels, channels, k], w).unwrap(),
            Tensor::zeros(vec![channels]),
        ];
        let mut tape = GradTape::new();
        let spec = LayerSpec::conv1d(channels, channels, k);
        let y = layer_forward(&spec, &params, Tensor::new(vec![1, channels, len], x.clone()).unwrap(), &mut tape).unwrap();
        let out_len = len - k + 1;
        prop_assert_eq!(y.shape(), &[1, channels, out_len][..]);
        for c in 0..channels {
            prop_assert_eq!(&y.data()[c * out_len..(c + 1) * out_len], &x[c * len + half..c * len + half + out_len]);
        }
    }

    #[test]
    fn random_chains_pass_gradient_check(layers in chain(), seed in any::<u64>()) {
        let err = grad_check(&layers, seed).unwrap();
        prop_assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn forward_and_backward_are_bit_reproducible(layers in chain(), seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params: Vec<Vec<Tensor>> = layers.iter().map(|l| l.init_params(&mut rng)).collect();
            let len = 12;
            let c = layers[0].in_dim;
            let x = Tensor::new(vec![3, c, len], (0..3 * c * len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut tape = GradTape::new();
            let y = forward_chain(&layers, &params, x, &mut tape).unwrap();
            let g = Tensor::new(y.shape().to_vec(), (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let grads = tape.backward(g).unwrap();
            (y, grads.params, grads.input)
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
        prop_assert_eq!(a.2, b.2);
    }

    #[test]
    fn swapping_channels_with_their_weights_changes_nothing(
        architecture in arch(),
        n in 2usize..=6,
        pair in (0usize..6, 0usize..6),
        seed in any::<u64>(),
    ) {
        let (a, b) = (pair.0 % n, pair.1 % n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = ArchSpec { hidden_dim: 8, output_dim: 4, ..ArchSpec::new(architecture, n) };
        let mut model = EncoderModel::init(arch, seed, 0).unwrap();
        for p in model.params_mut()[0].iter_mut() {
            for v in p.data_mut() {
                *v = quantized(&mut rng, 10, 1.0);
            }
        }
        let t = arch.receptive_field() + 5;
        let signal = Matrix::from_vec(t, n, (0..t * n).map(|_| quantized(&mut rng, 8, 4.0)).collect()).unwrap();

        let mut swapped_signal = signal.clone();
        for i in 0..t {
            let row = swapped_signal.row_mut(i);
            row.swap(a, b);
        }
        let mut swapped = model.clone();
        {
            let w = &mut swapped.params_mut()[0][0];
            let (out, inp, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let data = w.data_mut();
            for o in 0..out {
                for tap in 0..k {
                    data.swap((o * inp + a) * k + tap, (o * inp + b) * k + tap);
                }
            }
        }
        prop_assert_eq!(
            model.transform_series(&signal).unwrap(),
            swapped.transform_series(&swapped_signal).unwrap()
        );
    }

    #[test]
    fn series_transform_equals_window_by_window(
        architecture in arch(),
        n in 1usize..=5,
        extra in 0usize..=30,
        seed in any::<u64>(),
    ) {
        let arch = ArchSpec { hidden_dim: 8, output_dim: 3, ..ArchSpec::new(architecture, n) };
        let model = EncoderModel::init(arch, seed, 1).unwrap();
        let rf = arch.receptive_field();
        let t = rf + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let signal = Matrix::from_vec(t, n, (0..t * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let all = model.transform_series(&signal).unwrap();
        prop_assert_eq!(all.rows(), extra + 1);
        for i in 0..all.rows() {
            let window = signal.slice_rows(i, i + rf);
            prop_assert_eq!(all.row(i), &model.embed(&window).unwrap()[..]);
        }
    }
}
