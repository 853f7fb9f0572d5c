use corrflow::diagnostics::{auprc, auroc};
use corrflow::latentflow::{FlowArch, FlowField};
use corrflow::tensor::{forward, Array, GraphSpec, LayerSpec, ParamStore};
use proptest::prelude::*;

/// Direct NHWC convolution with `[k, k, cin, cout]` weights.
fn naive_conv(x: &Array, w: &Array, b: &Array, stride: usize, pad: usize) -> Vec<f32> {
    let [n, h, wd, cin] = x.shape()[..] else { panic!() };
    let [k, _, _, cout] = w.shape()[..] else { panic!() };
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; n * oh * ow * cout];
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = b.data()[co] as f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((oy * stride + ky) as isize - pad as isize, (ox * stride + kx) as isize - pad as isize);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[((img * h + iy as usize) * wd + ix as usize) * cin + ci];
                                let wv = w.data()[((ky * k + kx) * cin + ci) * cout + co];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((img * oh + oy) * ow + ox) * cout + co] = acc as f32;
                }
            }
        }
    }
    out
}

fn values(len: usize) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-1.0f32..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_sum(
        (n, h, cin, cout, k, stride, pad) in (1usize..3, 3usize..8, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2),
        seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * pad >= k);
        let spec = GraphSpec::new(&[h, h, cin], vec![LayerSpec::conv("c", cin, cout, k, stride, pad)]);
        let params = spec.init_params(seed);
        let x = Array::from_fn(&[n, h, h, cin], |i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 500.0 - 1.0);
        let got = forward(&spec, &params, &x, None).unwrap();
        let want = naive_conv(&x, params.get("c.w").unwrap(), params.get("c.b").unwrap(), stride, pad);
        prop_assert_eq!(got.len(), want.len());
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn dense_matches_matmul(x in values(12), w in values(12), b in values(4)) {
        let spec = GraphSpec::new(&[3], vec![LayerSpec::dense("d", 3, 4)]);
        let mut params = ParamStore::new(0);
        params.insert("d.w", Array::from_vec(&[3, 4], w.clone()).unwrap());
        params.insert("d.b", Array::from_vec(&[4], b.clone()).unwrap());
        let got = forward(&spec, &params, &Array::from_vec(&[4, 3], x.clone()).unwrap(), None).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want: f32 = b[c] + (0..3).map(|i| x[r * 3 + i] * w[i * 4 + c]).sum::<f32>();
                prop_assert!((got.data()[r * 4 + c] - want).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn constant_field_translates_exactly(c in values(2), z in values(2 * 4 * 4 * 2), steps in 1usize..40) {
        let arch = FlowArch { channels: [2, 2, 3, 3], latent_channels: 2 };
        let field = FlowField::constant(arch, &c).unwrap();
        let z0 = Array::from_vec(&[2, 4, 4, 2], z).unwrap();
        let end = field.integrate(&z0, steps, 1.0).unwrap();
        for (i, (e, s)) in end.data().iter().zip(z0.data()).enumerate() {
            prop_assert!((e - (s + c[i % 2])).abs() <= 1e-5 * steps as f32);
        }
    }

    #[test]
    fn ranking_metrics_ignore_monotone_rescaling(
        scores in proptest::collection::vec(0.0f32..1.0, 4..60),
        seed in 0u64..1000,
    ) {
        let labels: Vec<bool> = (0..scores.len()).map(|i| (i as u64 * 7 + seed) % 3 == 0).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let warped: Vec<f32> = scores.iter().map(|s| (3.0 * s).exp() + 2.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&warped, &labels).unwrap());
        prop_assert_eq!(auprc(&scores, &labels).unwrap(), auprc(&warped, &labels).unwrap());
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = auroc(&scores, &labels).unwrap() + auroc(&scores, &flipped).unwrap();
        prop_assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prefixed_stores_round_trip(names in proptest::collection::btree_set("[a-z]{1,6}", 1..6), seed in 0u64..99) {
        let mut s = ParamStore::new(seed);
        for (i, n) in names.iter().enumerate() {
            s.insert(n.clone(), Array::full(&[i + 1], i as f32));
        }
        let mut joined = ParamStore::new(0);
        joined.extend_prefixed("a.", &s);
        joined.extend_prefixed("b.", &s.zeros_like());
        let mut back = joined.strip_prefix("a.");
        back.set_seed(seed);
        prop_assert_eq!(back, s);
    }
}
