mod common;

use common::{fd_oracle, rng, tiny_config};
use motion_diffuse::autograd::Mat;
use motion_diffuse::denoiser::{Denoiser, EpsModel};
use motion_diffuse::diffusion::{normal_kl, DenoiserOutput, DiffusionSchedule};
use motion_diffuse::editor::{edit, EditMask};
use motion_diffuse::extractor::{info_nce, row_cross_entropy};
use motion_diffuse::metrics::{ape, ave, frechet_distance, r_precision};
use motion_diffuse::motion::{matrix_to_rot6d, rot6d_to_matrix, MotionSequence, Pose, Skeleton, MOTION_DIMS};
use motion_diffuse::params::normal;
use motion_diffuse::sampler::{guided_epsilon, respace, SampleSpec};
use motion_diffuse::text::TextEncoder;
use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Mat::from_shape_vec((rows, cols), v).unwrap())
}

fn positions(frames: usize) -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(-2.0f64..2.0, frames * 24 * 3)
        .prop_map(move |v| Array3::from_shape_vec((frames, 24, 3), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_pack_unpack_is_identity(flat in prop::collection::vec(-5.0f64..5.0, MOTION_DIMS)) {
        let pose = Pose::unpack(&flat).unwrap();
        prop_assert_eq!(pose.pack(), flat.clone());
        prop_assert_eq!(Pose::unpack(&pose.pack()).unwrap(), pose);
    }

    #[test]
    fn rot6d_round_trip(axis in prop::array::uniform3(-1.0f64..1.0), angle in -3.14f64..3.14) {
        let axis = Vector3::from(axis);
        prop_assume!(axis.norm() > 1e-3);
        let m: Matrix3<f64> = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner();
        let back = rot6d_to_matrix(&matrix_to_rot6d(&m).unwrap());
        prop_assert!((back - m).abs().max() < 1e-12);
    }

    #[test]
    fn fk_is_translation_equivariant(
        flat in prop::collection::vec(-1.0f64..1.0, MOTION_DIMS),
        shift in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let skel = Skeleton::default();
        let pose = Pose::unpack(&flat).unwrap();
        let mut moved = pose.clone();
        for k in 0..3 {
            moved.root_translation[k] += shift[k];
        }
        let (a, b) = (skel.forward_kinematics(&pose), skel.forward_kinematics(&moved));
        for j in 0..24 {
            for k in 0..3 {
                prop_assert!((b[j][k] - a[j][k] - shift[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_kl_is_nonnegative(m1 in -10.0f64..10.0, lv1 in -8.0f64..4.0, m2 in -10.0f64..10.0, lv2 in -8.0f64..4.0) {
        prop_assert!(normal_kl(m1, lv1, m2, lv2) >= 0.0);
        prop_assert!(normal_kl(m1, lv1, m1, lv1).abs() < 1e-12);
    }

    #[test]
    fn loss_kl_terms_nonnegative_and_padding_blind(
        m0 in mat(5, 3), noise in mat(5, 3), eps in mat(5, 3), v in mat(5, 3),
        junk in mat(2, 3), t in 2usize..=20,
    ) {
        let s = DiffusionSchedule::cosine(20, 0.008).unwrap();
        let valid = [true, true, true, false, false];
        let out = DenoiserOutput { eps: eps.clone(), v: v.clone() };
        let l = s.loss_terms(&m0, t, &noise, &out, 0.001, &valid).unwrap();
        prop_assert!(l.vlb >= 0.0);

        let mut m0b = m0.clone();
        let mut epsb = eps.clone();
        m0b.slice_mut(ndarray::s![3.., ..]).assign(&junk);
        epsb.slice_mut(ndarray::s![3.., ..]).assign(&junk.mapv(|x| -2.0 * x));
        let lb = s
            .loss_terms(&m0b, t, &noise, &DenoiserOutput { eps: epsb, v }, 0.001, &valid)
            .unwrap();
        prop_assert_eq!(l, lb);
    }

    #[test]
    fn guidance_is_linear(c in mat(3, 4), u in mat(3, 4), s in -2.0f64..12.0) {
        let g = guided_epsilon(&c, &u, s);
        let lhs = (&g - &u).mapv(|x| x * x).sum().sqrt();
        let rhs = s.abs() * (&c - &u).mapv(|x| x * x).sum().sqrt();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
    }

    #[test]
    fn respacing_keeps_selected_marginals(k in 1usize..=100) {
        let base = DiffusionSchedule::cosine(100, 0.008).unwrap();
        let r = respace(&base, k).unwrap();
        prop_assert_eq!(r.timesteps.len(), k);
        prop_assert_eq!(*r.timesteps.last().unwrap(), 100);
        prop_assert!(r.timesteps.windows(2).all(|w| w[0] < w[1]));
        for (i, &t) in r.timesteps.iter().enumerate() {
            prop_assert!((r.schedule.alpha_bar(i + 1) - base.alpha_bar(t)).abs() < 1e-14);
        }
    }

    #[test]
    fn fd_is_symmetric(a in mat(12, 3), b in mat(15, 3)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn fd_matches_denman_beavers(a in mat(30, 3), b in mat(30, 3)) {
        let got = frechet_distance(&a, &b).unwrap();
        let want = fd_oracle(&a, &b);
        prop_assert!((got - want).abs() < 1e-6 * (1.0 + want), "{} vs {}", got, want);
    }

    #[test]
    fn ape_ave_vanish_only_on_agreement(g in positions(4), r in positions(4)) {
        let same_ape = ape(&g.view(), &g.view()).unwrap();
        let same_ave = ave(&g.view(), &g.view()).unwrap();
        for v in [same_ape.root, same_ape.traj, same_ape.local, same_ape.global, same_ave.global] {
            prop_assert_eq!(v, 0.0);
        }
        let d = ape(&g.view(), &r.view()).unwrap();
        prop_assert!(d.global > 0.0 && d.root >= 0.0 && d.traj >= 0.0 && d.local >= 0.0);
        prop_assert!(ave(&g.view(), &r.view()).unwrap().global >= 0.0);
    }

    #[test]
    fn r_precision_nested_and_scale_invariant(m in mat(10, 4), pool in mat(12, 4), seed in 0u64..1000, scale in 0.1f64..10.0) {
        let labels: Vec<String> = (0..12).map(|i| format!("c{}", i % 6)).collect();
        let gt: Vec<usize> = (0..10).collect();
        let a = r_precision(&m, &gt, &pool, &labels, 5, &mut rng(seed)).unwrap();
        prop_assert!(a.top1 <= a.top2 && a.top2 <= a.top3);
        let b = r_precision(&m.mapv(|x| x * scale), &gt, &pool.mapv(|x| x * scale * 2.0), &labels, 5, &mut rng(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn row_shift_leaves_row_cross_entropy_unchanged(l in mat(5, 5), shift in prop::collection::vec(-20.0f64..20.0, 5)) {
        let mut shifted = l.clone();
        for (mut row, c) in shifted.rows_mut().into_iter().zip(&shift) {
            row.mapv_inplace(|x| x + c);
        }
        prop_assert!((row_cross_entropy(&l) - row_cross_entropy(&shifted)).abs() < 1e-10);
    }

    #[test]
    fn global_shift_leaves_info_nce_unchanged(l in mat(6, 6), c in -20.0f64..20.0) {
        prop_assert!((info_nce(&l) - info_nce(&l.mapv(|x| x + c))).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn editing_keeps_masked_entries_exactly(
        grid in prop::collection::vec(any::<bool>(), 6 * 6),
        second in prop::collection::vec(any::<bool>(), 6 * 6),
        seed in 0u64..100,
    ) {
        let (net, store) = Denoiser::new(tiny_config(), 3).unwrap();
        let model = net.with_params(&store);
        let enc = net.text_encoder(&store);
        let sched = DiffusionSchedule::cosine(10, 0.008).unwrap();
        let reference = MotionSequence::from_data(normal(&mut rng(seed), 6, 6, 1.0));
        let m1 = EditMask::from_grid(Array2::from_shape_vec((6, 6), grid).unwrap());
        let m2 = EditMask::from_grid(Array2::from_shape_vec((6, 6), second).unwrap());
        let spec = SampleSpec::new(6, seed);
        let (ctx, null) = (enc.encode("kick"), enc.encode(""));
        let once = edit(&model, &sched, &reference, &m1, &ctx, &null, &spec).unwrap();
        let again = edit(&model, &sched, &reference, &m1, &ctx, &null, &spec).unwrap();
        prop_assert_eq!(&once.data, &again.data);
        let twice = edit(&model, &sched, &once, &m2, &ctx, &null, &SampleSpec::new(6, seed + 1)).unwrap();
        for f in 0..6 {
            for d in 0..6 {
                if m1.grid()[[f, d]] {
                    prop_assert_eq!(once.data[[f, d]].to_bits(), reference.data[[f, d]].to_bits());
                }
                if m1.grid()[[f, d]] && m2.grid()[[f, d]] {
                    prop_assert_eq!(twice.data[[f, d]].to_bits(), reference.data[[f, d]].to_bits());
                }
            }
        }
    }

    #[test]
    fn padded_frames_never_reach_valid_outputs(len in 1usize..8, t in 1usize..1000, scale in 1.0f64..100.0, seed in 0u64..50) {
        let (net, store) = Denoiser::new(tiny_config(), seed).unwrap();
        let model = net.with_params(&store);
        let ctx = net.text_encoder(&store).encode("turn around");
        let mut m = normal(&mut rng(seed), 8, 6, 1.0);
        let a = model.predict(&m, t, len, &ctx).unwrap();
        m.slice_mut(ndarray::s![len.., ..]).mapv_inplace(|x| x * scale + 1.0);
        let b = model.predict(&m, t, len, &ctx).unwrap();
        prop_assert_eq!(a.eps.slice(ndarray::s![..len, ..]), b.eps.slice(ndarray::s![..len, ..]));
        prop_assert_eq!(a.v.slice(ndarray::s![..len, ..]), b.v.slice(ndarray::s![..len, ..]));
        prop_assert!(a.eps.slice(ndarray::s![len.., ..]).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn schedule_monotone_with_bounded_endpoints() {
    for steps in [10, 100, 1000] {
        let s = DiffusionSchedule::cosine(steps, 0.008).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1) < 1.0 && s.alpha_bar(1) > 0.9);
        assert!(s.alpha_bar(steps) >= 0.0 && s.alpha_bar(steps) < 1e-3);
        assert!(s.betas().iter().all(|&b| b > 0.0 && b <= 0.999));
    }
}

#[test]
fn diffuse_matches_closed_form_moments() {
    let s = DiffusionSchedule::cosine(50, 0.008).unwrap();
    let t = 20;
    let m0 = Mat::from_elem((1, 1), 1.5);
    let mut r = rng(4);
    let n = 40_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| s.diffuse(&m0, t, &normal(&mut r, 1, 1, 1.0)).unwrap()[[0, 0]])
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let ab = s.alpha_bar(t);
    let sigma = (1.0 - ab).sqrt();
    assert!((mean - ab.sqrt() * 1.5).abs() < 4.0 * sigma / (n as f64).sqrt());
    assert!((var / (1.0 - ab) - 1.0).abs() < 0.03);
}

#[test]
fn posterior_matches_two_step_sampling_moments() {
    // Sample M_{t-1} | M_0 then M_t | M_{t-1}; the empirical regression of
    // M_{t-1} on M_t must match the closed-form posterior mean coefficients.
    let s = DiffusionSchedule::cosine(30, 0.008).unwrap();
    let t = 10;
    let x0 = 0.7;
    let m0 = Mat::from_elem((1, 1), x0);
    let mut r = rng(5);
    let n = 60_000;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let prev = s.diffuse(&m0, t - 1, &normal(&mut r, 1, 1, 1.0)).unwrap();
        let cur = s.forward_step(&prev, t, &normal(&mut r, 1, 1, 1.0)).unwrap();
        pairs.push((cur[[0, 0]], prev[[0, 0]]));
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let slope = sxy / sxx;
    let resid = pairs.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum::<f64>() / (n - 2) as f64;
    let (c0, ct) = s.posterior_coefficients(t);
    assert!((slope - ct).abs() < 0.02, "slope {slope} vs {ct}");
    assert!(((my - slope * mx) - c0 * x0).abs() < 0.02);
    assert!((resid / s.posterior_var(t) - 1.0).abs() < 0.03);
}

#[test]
fn timesteps_are_uniform() {
    use motion_diffuse::dataset::{make_batch, Sample};
    let item = Sample {
        motion: MotionSequence::from_data(Mat::zeros((1, 2))),
        text: "walk".into(),
        label: None,
    };
    let items: Vec<&Sample> = vec![&item; 500];
    let steps = 20;
    let mut counts = vec![0usize; steps];
    let mut r = rng(6);
    for _ in 0..40 {
        for it in make_batch(&items, steps, 0.25, &mut r).unwrap().items {
            counts[it.t - 1] += 1;
        }
    }
    let expected = 20_000.0 / steps as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 19 degrees of freedom, 0.999 quantile.
    assert!(chi2 < 43.82, "chi2 {chi2}");
}

#[test]
fn generated_motions_survive_a_file_round_trip() {
    use motion_diffuse::dataset::{generate_synthetic, load_dataset, DatasetSpec};
    let dir = tempfile::TempDir::new().unwrap();
    let spec = DatasetSpec {
        samples_per_class: 2,
        min_frames: 10,
        max_frames: 14,
        ..DatasetSpec::default()
    };
    let written = generate_synthetic(&spec, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(written, loaded);
}
