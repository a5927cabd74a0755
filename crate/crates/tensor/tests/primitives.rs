use cellsearch_tensor::{ParamSet, Tape, Tensor, TensorError, IGNORE_LABEL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(dims: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(dims, data).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv2d_ones_center_is_nine() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0).unwrap());
    let y = tape.conv2d(x, w, None, 1, 1, 1, 1).unwrap();
    let v = tape.value(y);
    assert_eq!(v.dims(), &[1, 1, 3, 3]);
    assert_eq!(v.data()[4], 9.0);
    // corners see four ones under zero padding
    assert_eq!(v.data()[0], 4.0);
}

#[test]
fn conv2d_identity_kernel_and_groups() {
    let mut r = rng(1);
    let x = Tensor::randn(&[2, 3, 5, 6], &mut r).unwrap();
    let mut k = vec![0.0; 3 * 9];
    for c in 0..3 {
        k[c * 9 + 4] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(t(&[3, 1, 3, 3], k));
    let y = tape.conv2d(xv, w, None, 1, 1, 3, 1).unwrap();
    assert!(tape.value(y).max_abs_diff(&x) == 0.0);
}

#[test]
fn conv2d_same_padding_and_stride_shapes() {
    let mut r = rng(2);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[1, 4, 8, 8], &mut r).unwrap());
    let w = tape.constant(Tensor::randn(&[4, 1, 5, 5], &mut r).unwrap());
    let y = tape.conv2d(x, w, None, 1, 6, 4, 12).unwrap();
    assert_eq!(tape.value(y).dims(), &[1, 4, 8, 8]);
    let w2 = tape.constant(Tensor::randn(&[6, 4, 3, 3], &mut r).unwrap());
    let y2 = tape.conv2d(x, w2, None, 2, 1, 1, 1).unwrap();
    assert_eq!(tape.value(y2).dims(), &[1, 6, 4, 4]);
}

#[test]
fn conv2d_shape_errors_name_the_dimension() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]).unwrap());
    let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]).unwrap());
    let err = tape.conv2d(x, w, None, 1, 1, 1, 1).unwrap_err();
    match err {
        TensorError::DimMismatch { dim, expected, actual, .. } => {
            assert!(dim.contains("weight input channels"));
            assert_eq!((expected, actual), (3, 2));
        }
        other => panic!("unexpected {other:?}"),
    }
    let w = tape.constant(Tensor::zeros(&[2, 1, 3, 3]).unwrap());
    assert!(tape.conv2d(x, w, None, 1, 1, 2, 1).is_err());
}

#[test]
fn conv3d_selecting_kernel_and_bias() {
    let mut r = rng(3);
    let mut tape = Tape::new();
    let a = Tensor::randn(&[2, 2, 4, 5], &mut r).unwrap();
    let b = Tensor::randn(&[2, 2, 4, 5], &mut r).unwrap();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b);
    let x = tape.stack_depth(av, bv).unwrap();
    assert_eq!(tape.value(x).dims(), &[2, 2, 2, 4, 5]);
    // out channel o copies input channel o from depth slice 0
    let mut k = vec![0.0; 2 * 2 * 2 * 9];
    for o in 0..2 {
        k[((o * 2 + o) * 2) * 9 + 4] = 1.0;
    }
    let w = tape.constant(t(&[2, 2, 2, 3, 3], k));
    let y = tape.conv3d_2x3x3(x, w, None).unwrap();
    assert_eq!(tape.value(y).dims(), &[2, 2, 4, 5]);
    assert_eq!(tape.value(y).max_abs_diff(&a), 0.0);

    let wz = tape.constant(Tensor::zeros(&[3, 2, 2, 3, 3]).unwrap());
    let beta = tape.constant(t(&[3], vec![0.7, 0.7, 0.7]));
    let y = tape.conv3d_2x3x3(x, wz, Some(beta)).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn conv3d_rejects_depth_other_than_two() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 3, 4, 4]).unwrap());
    let w = tape.constant(Tensor::zeros(&[1, 2, 2, 3, 3]).unwrap());
    assert!(matches!(
        tape.conv3d_2x3x3(x, w, None),
        Err(TensorError::DimMismatch { dim: "input depth", .. })
    ));
}

#[test]
fn bilinear_resize_identity_constant_and_corners() {
    let mut r = rng(4);
    let x = Tensor::randn(&[2, 3, 5, 7], &mut r).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.bilinear_resize(xv, 5, 7).unwrap();
    assert_eq!(tape.value(y).max_abs_diff(&x), 0.0);

    let c = tape.constant(Tensor::full(&[1, 2, 3, 4], 1.25).unwrap());
    let y = tape.bilinear_resize(c, 9, 2).unwrap();
    assert!(tape.value(y).data().iter().all(|v| (v - 1.25).abs() < 1e-15));

    let s = tape.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let y = tape.bilinear_resize(s, 3, 3).unwrap();
    let v = tape.value(y).data();
    assert_eq!((v[0], v[2], v[6], v[8]), (1.0, 2.0, 3.0, 4.0));
    assert!((v[4] - 2.5).abs() < 1e-15);
}

#[test]
fn bilinear_resize_quadruples_coarse_maps() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
    let y = tape.bilinear_resize(x, 8, 8).unwrap();
    assert_eq!(tape.value(y).dims(), &[1, 2, 8, 8]);
}

fn identity_grid(n: usize, h: usize, w: usize) -> Tensor {
    let mut g = Vec::new();
    for _ in 0..n {
        for i in 0..h {
            for j in 0..w {
                g.push(-1.0 + 2.0 * j as f64 / (w - 1) as f64);
                g.push(-1.0 + 2.0 * i as f64 / (h - 1) as f64);
            }
        }
    }
    t(&[n, h, w, 2], g)
}

#[test]
fn grid_sample_identity_and_out_of_range() {
    let mut r = rng(5);
    let x = Tensor::randn(&[2, 3, 6, 5], &mut r).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(identity_grid(2, 6, 5));
    let y = tape.grid_sample(xv, g).unwrap();
    assert!(tape.value(y).max_abs_diff(&x) < 1e-10);

    let far = tape.constant(Tensor::full(&[2, 6, 5, 2], -3.0).unwrap());
    let y = tape.grid_sample(xv, far).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn affine_grid_identity_matches_identity_grid() {
    let mut tape = Tape::new();
    let theta = tape.constant(t(&[1, 6], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
    let g = tape.affine_grid(theta, 4, 6).unwrap();
    assert!(tape.value(g).max_abs_diff(&identity_grid(1, 4, 6)) < 1e-15);
}

#[test]
fn pools_on_known_inputs() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2, 3, 4, 4], -0.5).unwrap());
    let y = tape.global_avg_pool(c).unwrap();
    assert_eq!(tape.value(y).dims(), &[2, 3, 1, 1]);
    assert!(tape.value(y).data().iter().all(|&v| v == -0.5));

    let s = tape.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let y = tape.global_avg_pool(s).unwrap();
    assert_eq!(tape.value(y).item(), 2.5);

    let q: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let qv = tape.constant(t(&[1, 1, 4, 4], q.clone()));
    let y = tape.adaptive_avg_pool(qv, 2, 2).unwrap();
    let expect = [
        (q[0] + q[1] + q[4] + q[5]) / 4.0,
        (q[2] + q[3] + q[6] + q[7]) / 4.0,
        (q[8] + q[9] + q[12] + q[13]) / 4.0,
        (q[10] + q[11] + q[14] + q[15]) / 4.0,
    ];
    assert_eq!(tape.value(y).data(), &expect);
    let y = tape.adaptive_avg_pool(qv, 4, 4).unwrap();
    assert_eq!(tape.value(y).data(), q.as_slice());
    assert!(tape.adaptive_avg_pool(qv, 5, 4).is_err());
}

#[test]
fn adaptive_pool_matches_window_enumeration() {
    let mut r = rng(6);
    let x = Tensor::randn(&[2, 2, 5, 5], &mut r).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.adaptive_avg_pool(xv, 3, 3).unwrap();
    // Oracle: each output cell (i, j) averages every input (y, x) with
    // floor(i*5/3) <= y < ceil((i+1)*5/3), computed in real arithmetic.
    let mut expect = Vec::new();
    for plane in x.data().chunks(25) {
        for i in 0..3 {
            for j in 0..3 {
                let (mut s, mut n) = (0.0, 0);
                for yy in 0..5 {
                    for xx in 0..5 {
                        let in_y = (yy as f64) >= (i as f64 * 5.0 / 3.0).floor()
                            && (yy as f64) < ((i + 1) as f64 * 5.0 / 3.0).ceil();
                        let in_x = (xx as f64) >= (j as f64 * 5.0 / 3.0).floor()
                            && (xx as f64) < ((j + 1) as f64 * 5.0 / 3.0).ceil();
                        if in_y && in_x {
                            s += plane[yy * 5 + xx];
                            n += 1;
                        }
                    }
                }
                expect.push(s / n as f64);
            }
        }
    }
    for (a, b) in tape.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn elementwise_basics() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
    let s = tape.sigmoid(z);
    assert!(tape.value(s).data().iter().all(|&v| v == 0.5));

    let mut r = rng(7);
    let a = Tensor::randn(&[2, 3, 4, 4], &mut r).unwrap();
    let b = Tensor::randn(&[2, 5, 4, 4], &mut r).unwrap();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let c = tape.concat_channels(&[av, bv]).unwrap();
    assert_eq!(tape.value(c).dims(), &[2, 8, 4, 4]);
    let a2 = tape.slice_channels(c, 0, 3).unwrap();
    let b2 = tape.slice_channels(c, 3, 5).unwrap();
    assert_eq!(tape.value(a2), &a);
    assert_eq!(tape.value(b2), &b);

    let wrong = tape.constant(Tensor::zeros(&[2, 3, 4, 5]).unwrap());
    assert!(tape.add(av, wrong).is_err());
    assert!(tape.concat_channels(&[av, wrong]).is_err());
}

#[test]
fn cross_entropy_uniform_and_ignored() {
    let mut tape = Tape::new();
    let logits = tape.input(Tensor::zeros(&[1, 4, 2, 3]).unwrap());
    let loss = tape.softmax_cross_entropy(logits, &[0, 1, 2, 3, 0, 1]).unwrap();
    assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

    let mut tape = Tape::new();
    let logits = tape.input(Tensor::full(&[1, 4, 2, 3], 0.3).unwrap());
    let loss = tape
        .softmax_cross_entropy(logits, &[IGNORE_LABEL; 6])
        .unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(logits).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_entropy_rejects_bad_labels() {
    let mut tape = Tape::new();
    let logits = tape.input(Tensor::zeros(&[1, 3, 1, 2]).unwrap());
    assert!(matches!(
        tape.softmax_cross_entropy(logits, &[0, 3]),
        Err(TensorError::LabelOutOfRange { label: 3, index: 1, classes: 3 })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot_over_count() {
    let mut r = rng(8);
    let x = Tensor::randn(&[1, 3, 1, 3], &mut r).unwrap();
    let labels = [2u8, IGNORE_LABEL, 0];
    let mut tape = Tape::new();
    let lv = tape.input(x.clone());
    let loss = tape.softmax_cross_entropy(lv, &labels).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.wrt(lv).unwrap();
    for (p, &l) in labels.iter().enumerate() {
        let logits: Vec<f64> = (0..3).map(|c| x.data()[c * 3 + p]).collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for c in 0..3 {
            let expect = if l == IGNORE_LABEL {
                0.0
            } else {
                (logits[c].exp() / z - if c == l as usize { 1.0 } else { 0.0 }) / 2.0
            };
            assert!((g[c * 3 + p] - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn backward_analytic_cases() {
    let mut r = rng(9);
    let x = Tensor::randn(&[1, 2, 3, 3], &mut r).unwrap();
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let s = tape.sum(xv);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(xv).unwrap().iter().all(|&v| v == 1.0));

    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    for (gv, xv) in g.wrt(xv).unwrap().iter().zip(x.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-15);
    }
    assert!(matches!(
        tape.backward(sq),
        Err(TensorError::NonScalarRoot { numel: 18 })
    ));
}

#[test]
fn backward_twice_doubles_parameter_gradients() {
    let mut r = rng(10);
    let mut set = ParamSet::new();
    let w = set.add("w", Tensor::randn(&[3, 2, 3, 3], &mut r).unwrap(), true);
    let frozen = set.add("frozen", Tensor::randn(&[3], &mut r).unwrap(), false);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[1, 2, 4, 4], &mut r).unwrap());
    let wv = tape.param(&set, w);
    let bv = tape.param(&set, frozen);
    let y = tape.conv2d(x, wv, Some(bv), 1, 1, 1, 1).unwrap();
    let y = tape.tanh(y);
    let loss = tape.sum(y);
    tape.backward_into(loss, &mut set).unwrap();
    let once = set.get(w).grad().unwrap().to_vec();
    tape.backward_into(loss, &mut set).unwrap();
    let twice = set.get(w).grad().unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
    assert!(set.get(frozen).grad().is_none());
    assert!(once.iter().any(|&v| v != 0.0));
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(11);
    let x = Tensor::randn(&[1, 4, 6, 6], &mut r).unwrap();
    let off = Tensor::randn(&[1, 18, 6, 6], &mut r).unwrap();
    let w = Tensor::randn(&[3, 4, 3, 3], &mut r).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ov = tape.constant(off.clone());
        let wv = tape.constant(w.clone());
        let y = tape.deform_conv3x3(xv, ov, wv, None).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn deform_with_zero_offsets_equals_conv() {
    let mut r = rng(12);
    let x = Tensor::randn(&[2, 3, 5, 6], &mut r).unwrap();
    let w = Tensor::randn(&[4, 3, 3, 3], &mut r).unwrap();
    let b = Tensor::randn(&[4], &mut r).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let ov = tape.constant(Tensor::zeros(&[2, 18, 5, 6]).unwrap());
    let wv = tape.constant(w);
    let bv = tape.constant(b);
    let d = tape.deform_conv3x3(xv, ov, wv, Some(bv)).unwrap();
    let c = tape.conv2d(xv, wv, Some(bv), 1, 1, 1, 1).unwrap();
    assert!(tape.value(d).max_abs_diff(tape.value(c)) < 1e-10);
}
