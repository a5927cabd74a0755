//! Central finite differences (h = 1e-5) against reverse-mode gradients for
//! every primitive, on N(0,1) inputs. Each function is reduced to a scalar by
//! a fixed random projection so no gradient entry is trivially symmetric.

use cellsearch_tensor::gradcheck::{check_inputs, GradCheckOptions};
use cellsearch_tensor::{Result, Tape, Tensor, Var, IGNORE_LABEL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn randn(dims: &[usize], seed: u64) -> Tensor {
    Tensor::randn(dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let dims = tape.value(y).dims().to_vec();
    let r = tape.constant(randn(&dims, seed ^ 0xABCD));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn assert_check<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = check_inputs(inputs, f, GradCheckOptions::default()).unwrap();
    for (arg, err, n) in &report.arguments {
        assert!(*err < TOL, "{name} {arg}: rel err {err:e} over {n} entries");
    }
}

#[test]
fn conv2d_dilated() {
    let inputs = [randn(&[2, 3, 5, 5], 1), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)];
    assert_check("conv2d dil3", &inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 3, 1, 3)?;
        project(t, y, 4)
    });
}

#[test]
fn conv2d_strided_grouped() {
    let inputs = [randn(&[2, 4, 7, 6], 5), randn(&[6, 2, 3, 3], 6), randn(&[6], 7)];
    assert_check("conv2d s2 g2", &inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 2, 1)?;
        project(t, y, 8)
    });
}

#[test]
fn conv3d() {
    let inputs = [
        randn(&[2, 2, 4, 4], 9),
        randn(&[2, 2, 4, 4], 10),
        randn(&[3, 2, 2, 3, 3], 11),
        randn(&[3], 12),
    ];
    assert_check("conv3d", &inputs, |t, v| {
        let x = t.stack_depth(v[0], v[1])?;
        let y = t.conv3d_2x3x3(x, v[2], Some(v[3]))?;
        project(t, y, 13)
    });
}

#[test]
fn bilinear_resize_up_and_down() {
    let inputs = [randn(&[2, 2, 3, 4], 14)];
    assert_check("resize up", &inputs, |t, v| {
        let y = t.bilinear_resize(v[0], 7, 9)?;
        project(t, y, 15)
    });
    let inputs = [randn(&[1, 2, 8, 8], 16)];
    assert_check("resize down", &inputs, |t, v| {
        let y = t.bilinear_resize(v[0], 3, 5)?;
        project(t, y, 17)
    });
}

#[test]
fn grid_sample_both_arguments() {
    let mut r = ChaCha8Rng::seed_from_u64(18);
    let grid: Vec<f64> = (0..2 * 4 * 5 * 2).map(|_| r.random_range(-0.9..0.9)).collect();
    let inputs = [randn(&[2, 3, 6, 5], 19), Tensor::from_vec(&[2, 4, 5, 2], grid).unwrap()];
    assert_check("grid_sample", &inputs, |t, v| {
        let y = t.grid_sample(v[0], v[1])?;
        project(t, y, 20)
    });
}

#[test]
fn affine_grid_into_sampler() {
    let mut theta = randn(&[2, 6], 21);
    for (i, v) in theta.data_mut().iter_mut().enumerate() {
        *v = *v * 0.2 + if i % 6 == 0 || i % 6 == 4 { 0.8 } else { 0.0 };
    }
    let inputs = [randn(&[2, 2, 5, 5], 22), theta];
    assert_check("affine warp", &inputs, |t, v| {
        let g = t.affine_grid(v[1], 5, 5)?;
        let y = t.grid_sample(v[0], g)?;
        project(t, y, 23)
    });
}

#[test]
fn pools() {
    let inputs = [randn(&[2, 3, 4, 5], 24)];
    assert_check("gap", &inputs, |t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y, 25)
    });
    let inputs = [randn(&[2, 2, 5, 7], 26)];
    assert_check("adaptive", &inputs, |t, v| {
        let y = t.adaptive_avg_pool(v[0], 3, 3)?;
        project(t, y, 27)
    });
}

#[test]
fn global_avg_pool_gradient_is_uniform_share() {
    let mut tape = Tape::new();
    let x = tape.input(randn(&[1, 2, 3, 4], 28));
    let y = tape.global_avg_pool(x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(x).unwrap().iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-15));
}

#[test]
fn elementwise_family() {
    let a = randn(&[2, 3, 4, 4], 29);
    let b = randn(&[2, 3, 4, 4], 30);
    let bc = randn(&[2, 3, 1, 1], 31);
    let w = randn(&[3], 32);
    assert_check("add/sub/mul", &[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        project(t, m, 33)
    });
    assert_check("broadcast", &[a.clone(), bc], |t, v| {
        let s = t.add(v[0], v[1])?;
        let m = t.mul(s, v[1])?;
        project(t, m, 34)
    });
    assert_check("scale_by_channel", &[a.clone(), w], |t, v| {
        let y = t.scale_by_channel(v[0], v[1])?;
        project(t, y, 35)
    });
    assert_check("unary", &[a.clone()], |t, v| {
        let s = t.sigmoid(v[0]);
        let th = t.tanh(v[0]);
        let r = t.relu(v[0]);
        let e = t.exp(s);
        let x = t.add(s, th)?;
        let x = t.add(x, r)?;
        let x = t.mul(x, e)?;
        let x = t.scale(x, 0.7);
        project(t, x, 36)
    });
    assert_check("concat/slice", &[a, b], |t, v| {
        let c = t.concat_channels(&[v[0], v[1], v[0]])?;
        let s = t.slice_channels(c, 2, 3)?;
        let m = t.mean(c);
        let p = project(t, s, 37)?;
        t.add(p, m)
    });
}

#[test]
fn dense_family() {
    let x = randn(&[3, 5], 38);
    let w = randn(&[4, 5], 39);
    let b = randn(&[4], 40);
    assert_check("linear", &[x, w, b], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        project(t, y, 41)
    });
    let table = randn(&[6, 4], 42);
    let logits = randn(&[1, 7], 43);
    assert_check("embed + log_softmax", &[table, logits], |t, v| {
        let e = t.select_row(v[0], 2)?;
        let lp = t.masked_log_softmax(v[1], 5)?;
        let p = t.pick(lp, 3)?;
        let ent_p = t.exp(lp);
        let ent = t.mul(ent_p, lp)?;
        let ent = t.sum(ent);
        let s = project(t, e, 44)?;
        let s = t.add(s, p)?;
        t.add(s, ent)
    });
}

#[test]
fn clipped_surrogate_gradient_and_clipping() {
    // inside the trust region the surrogate is r*A
    assert_check("surrogate", &[Tensor::scalar(-1.0)], |t, v| t.clipped_surrogate(v[0], -1.05, 0.8, 0.2));
    // r = e^0.5 > 1.2 with positive advantage: clipped branch, zero gradient
    let mut tape = Tape::new();
    let lp = tape.input(Tensor::scalar(0.5));
    let s = tape.clipped_surrogate(lp, 0.0, 1.0, 0.2).unwrap();
    assert!((tape.value(s).item() - 1.2).abs() < 1e-15);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(lp).unwrap()[0], 0.0);
}

#[test]
fn cross_entropy_with_ignored_pixels() {
    let mut labels = vec![0u8; 2 * 3 * 4];
    let mut r = ChaCha8Rng::seed_from_u64(45);
    for l in labels.iter_mut() {
        *l = if r.random_bool(0.2) { IGNORE_LABEL } else { r.random_range(0..4) };
    }
    assert_check("cross_entropy", &[randn(&[2, 4, 3, 4], 46)], |t, v| {
        t.softmax_cross_entropy(v[0], &labels)
    });
}

#[test]
fn dynamic_filters() {
    let inputs = [randn(&[2, 3, 5, 5], 47), randn(&[2, 3, 6, 6], 48)];
    assert_check("pool + l1 + dynamic depthwise", &inputs, |t, v| {
        let f = t.adaptive_avg_pool(v[1], 3, 3)?;
        let f = t.l1_normalize_spatial(f, 1e-6)?;
        let y = t.dynamic_depthwise3x3(v[0], f)?;
        project(t, y, 49)
    });
}

#[test]
fn deformable_conv_all_arguments() {
    let mut off = randn(&[2, 18, 5, 5], 50);
    off.data_mut().iter_mut().for_each(|v| *v *= 0.7);
    let inputs = [randn(&[2, 3, 5, 5], 51), off, randn(&[4, 3, 3, 3], 52), randn(&[4], 53)];
    assert_check("deform", &inputs, |t, v| {
        let y = t.deform_conv3x3(v[0], v[1], v[2], Some(v[3]))?;
        project(t, y, 54)
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn concat_then_slice_is_identity(c1 in 1usize..5, c2 in 1usize..5, h in 1usize..5, seed in 0u64..1000) {
        let a = randn(&[2, c1, h, 3], seed);
        let b = randn(&[2, c2, h, 3], seed + 1);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.concat_channels(&[av, bv]).unwrap();
        let a2 = tape.slice_channels(c, 0, c1).unwrap();
        let b2 = tape.slice_channels(c, c1, c2).unwrap();
        prop_assert_eq!(tape.value(a2), &a);
        prop_assert_eq!(tape.value(b2), &b);
    }

    #[test]
    fn resize_to_same_size_is_exact(h in 1usize..7, w in 1usize..7, seed in 0u64..1000) {
        let x = randn(&[1, 2, h, w], seed);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.bilinear_resize(xv, h, w).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }
}
