use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::inference::tape::grad_check_inputs;
use crate::inference::ParamSet;
use crate::kinematics::{BoneRef, Joint, PoseFrame};
use crate::synth::{project_unchecked, random_calibration, simulate_dataset, Dataset, DatasetSpec, MotionKind, NoiseSpec, Rig};

fn dataset(noise: NoiseSpec, frames: usize, seed: u64) -> Dataset {
    let s = SkeletonConfig::default_humanoid();
    let spec = DatasetSpec {
        sequences: 1,
        frames,
        fps: 30.0,
        kinds: MotionKind::ALL.to_vec(),
        noise,
        sensors: s.bones(),
    };
    let calib = random_calibration(&s.bones(), seed);
    simulate_dataset(&spec, &s, &Rig::desk(), &calib, seed).unwrap()
}

fn extra_sensors(d: &Dataset) -> Vec<usize> {
    let s = &d.manifest.skeleton;
    d.manifest.sensors.iter().copied().filter(|b| !s.imu_map.contains(b)).collect()
}

fn problem_from(d: &Dataset, network: &MotionSequence, cameras: &[usize]) -> RefinementProblem {
    RefinementProblem::from_network(
        &d.manifest.skeleton,
        &d.manifest.rig.cameras,
        network,
        &d.sequences[0].frames,
        cameras,
        &extra_sensors(d),
        EnergyWeights::default(),
    )
    .unwrap()
}

fn gt_motion(d: &Dataset) -> MotionSequence {
    MotionSequence {
        fps: d.manifest.fps,
        frames: d.sequences[0].frames.iter().map(|f| f.pose.clone()).collect(),
    }
}

/// Ground truth with every joint angle jittered uniformly by up to `deg`,
/// kept inside the limits.
fn jittered(m: &MotionSequence, limits: &JointLimits, deg: f64, seed: u64) -> MotionSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e, _) = motion_to_euler(m).unwrap();
    let d = deg.to_radians();
    for f in &mut e.frames {
        for a in &mut f.angles {
            for k in 0..3 {
                a[k] += rng.random_range(-d..d);
            }
        }
        *f = clamp_pose(f, limits);
    }
    euler_to_motion(&e)
}

fn root_aligned_mpjpe(s: &SkeletonConfig, a: &MotionSequence, b: &MotionSequence) -> f64 {
    let mut total = 0.0;
    for (pa, pb) in a.frames.iter().zip(&b.frames) {
        let fa = forward_kinematics(s, pa).unwrap().root_relative();
        let fb = forward_kinematics(s, pb).unwrap().root_relative();
        total += fa.iter().zip(&fb).map(|(x, y)| (x - y).norm()).sum::<f64>() / fa.len() as f64;
    }
    total / a.frames.len() as f64
}

#[test]
fn zero_energy_problem_is_returned_bitwise() {
    let d = dataset(NoiseSpec::zero(), 8, 1);
    let gt = gt_motion(&d);
    let p = problem_from(&d, &gt, &[0, 1, 2, 3]);
    let e = energy(&clamp_motion(&gt, &p.limits).unwrap(), &p).unwrap();
    assert!(e.total < 1e-18, "{:?}", e);
    let r = refine(&p).unwrap();
    assert_eq!(r.motion, gt);
    assert!(r.trace.iter().all(|t| t.energies.iter().all(|v| *v == t.energies[0])));
}

#[test]
fn zero_weights_give_zero_energy() {
    let d = dataset(NoiseSpec::default(), 6, 2);
    let init = jittered(&gt_motion(&d), &JointLimits::from_skeleton(&d.manifest.skeleton), 10.0, 2);
    let mut p = problem_from(&d, &init, &[0]);
    p.weights = EnergyWeights::zero();
    let e = energy(&clamp_motion(&init, &p.limits).unwrap(), &p).unwrap();
    assert_eq!(e.total, 0.0);
}

#[test]
fn translation_shift_raises_position_term() {
    let d = dataset(NoiseSpec::zero(), 6, 3);
    let gt = gt_motion(&d);
    let p = problem_from(&d, &gt, &[0]);
    let mut m = clamp_motion(&gt, &p.limits).unwrap();
    m.frames[2].t.x += 0.01;
    let e = energy(&m, &p).unwrap();
    let expected = p.skeleton.num_joints() as f64 * 1e-4 * p.weights.w3d;
    assert!((e.e3d - expected).abs() < 1e-12, "{} vs {}", e.e3d, expected);
    // every frame but the shifted one stays exact, so the other terms
    // only see frame 2
    assert!(e.e2d > 0.0 && e.acc > 0.0);
    assert!(e.ori < 1e-20);
}

#[test]
fn tape_energy_matches_plain_energy_and_gradients() {
    for seed in 0..3 {
        let d = dataset(NoiseSpec::default(), 4, 10 + seed);
        let init = jittered(&gt_motion(&d), &JointLimits::from_skeleton(&d.manifest.skeleton), 5.0, seed);
        let p = problem_from(&d, &init, &[0, 1]);
        let mut m = clamp_motion(&init, &p.limits).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for f in &mut m.frames {
            f.t += Vector3::new(rng.random_range(-0.02..0.02), 0.01, -0.01);
        }
        let x = flatten(&m);
        let plain = energy(&m, &p).unwrap().total;
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let e = energy_on_tape(&mut tape, xv, &p);
        assert!((tape.scalar(e) - plain).abs() <= 1e-9 * plain, "{} vs {}", tape.scalar(e), plain);
        let rep = grad_check_inputs(&ParamSet::new(), &x, Some(60), seed, |tape, _, xv| {
            let e = energy_on_tape(tape, xv, &p);
            tape.scale(e, 1e-3)
        });
        assert!(rep.max_rel_error < 1e-4, "{:?}", rep);
    }
}

#[test]
fn clamp_pose_cases() {
    let s = SkeletonConfig::default_humanoid();
    let l = JointLimits::from_skeleton(&s);
    let inside = EulerPose {
        angles: vec![Vector3::new(0.05, -0.2, 0.3); 19],
        t: Vector3::new(5.0, -3.0, 1.0),
    };
    assert_eq!(clamp_pose(&inside, &l), inside);
    let mut over = inside.clone();
    over.angles[14].x = l.max[14].x + 0.1;
    over.angles[0].y = 100.0;
    let c = clamp_pose(&over, &l);
    assert_eq!(c.angles[14].x, l.max[14].x);
    assert_eq!(c.angles[0].y, 100.0);
    assert_eq!(clamp_pose(&c, &l), c);
    assert!(matches!(l.check(&over), Err(OptimizerError::LimitViolation { joint: 14, axis: 0, .. })));
}

#[test]
fn energy_rejects_out_of_range_pose_and_bad_problems() {
    let d = dataset(NoiseSpec::zero(), 4, 4);
    let gt = gt_motion(&d);
    let mut p = problem_from(&d, &gt, &[0]);
    let mut m = clamp_motion(&gt, &p.limits).unwrap();
    m.frames[1].angles[7].z = 4.0;
    assert!(matches!(energy(&m, &p), Err(OptimizerError::LimitViolation { joint: 7, axis: 2, .. })));
    p.window = 2;
    assert!(matches!(refine(&p), Err(OptimizerError::InvalidProblem(_))));
    p.window = 8;
    p.observations.pop();
    assert!(matches!(refine(&p), Err(OptimizerError::InvalidProblem(_))));
}

#[test]
fn refinement_descends_and_stays_feasible() {
    for seed in 0..4 {
        let d = dataset(NoiseSpec::default(), 12, 20 + seed);
        let init = jittered(&gt_motion(&d), &JointLimits::from_skeleton(&d.manifest.skeleton), 8.0, seed);
        let mut p = problem_from(&d, &init, &[0]);
        p.window = 6;
        let r = refine(&p).unwrap();
        assert_eq!(r.trace.len(), 3);
        for t in &r.trace {
            assert!(t.energies.windows(2).all(|w| w[1] <= w[0]), "{:?}", t.energies);
            assert!(t.energies.last().unwrap() < &t.energies[0]);
        }
        for f in &r.euler.frames {
            p.limits.check(f).unwrap();
        }
        assert_eq!(r.motion, euler_to_motion(&r.euler));
        assert_eq!(r.motion.frames.len(), 12);
    }
}

#[test]
fn window_starts_cover_sequence() {
    assert_eq!(window_starts(10, 360), vec![0]);
    assert_eq!(window_starts(10, 10), vec![0]);
    assert_eq!(window_starts(12, 6), vec![0, 3, 6]);
    assert_eq!(window_starts(13, 6), vec![0, 3, 6, 7]);
}

/// Root plus a planar chain of three segments along +x; every joint
/// carries a marker.
fn toy_skeleton() -> SkeletonConfig {
    let j = |name: &str, parent: Option<usize>, offset: [f64; 3]| Joint {
        name: name.into(),
        parent,
        offset,
        limits_deg: None,
        end_site: None,
    };
    SkeletonConfig {
        format_version: 1,
        joints: vec![
            j("root", None, [0.0; 3]),
            j("a", Some(0), [0.3, 0.0, 0.0]),
            j("b", Some(1), [0.25, 0.0, 0.0]),
            j("c", Some(2), [0.2, 0.0, 0.0]),
        ],
        key_bones: [BoneRef::Segment(1); 7],
        marker_map: vec![0, 1, 2, 3],
        imu_map: vec![],
        limb_endpoints: vec![],
        limb_bones: vec![],
        body_endpoints: vec![],
        body_bones: vec![],
    }
}

/// Closed-form joint positions of the toy chain with hinge angles `a`, `b`
/// about z at joints 1 and 2.
fn toy_joints(a: f64, b: f64) -> [Vector3<f64>; 4] {
    let j1 = Vector3::new(0.3, 0.0, 0.0);
    let j2 = j1 + 0.25 * Vector3::new(a.cos(), a.sin(), 0.0);
    let j3 = j2 + 0.2 * Vector3::new((a + b).cos(), (a + b).sin(), 0.0);
    [Vector3::zeros(), j1, j2, j3]
}

#[test]
fn toy_refinement_matches_grid_search() {
    let s = toy_skeleton();
    let cam = CameraModel::look_at(
        Vector3::new(0.6, 0.8, 2.0),
        Vector3::new(0.4, 0.1, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        800.0,
        640,
        480,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..3 {
        let (a0, b0) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let p: Vec<Vector2<f64>> = toy_joints(a0, b0)
            .iter()
            .map(|x| project_unchecked(&cam, &cam.to_camera(x)) + Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let sigma = vec![1.0; 4];
        let residual = |a: f64, b: f64| -> f64 {
            toy_joints(a, b)
                .iter()
                .zip(&p)
                .map(|(x, q)| (project_unchecked(&cam, &cam.to_camera(x)) - q).norm_squared())
                .sum()
        };
        // exhaustive grid around the truth, 1e-3 rad spacing
        let (mut best, mut arg) = (f64::INFINITY, (0.0, 0.0));
        for i in -400..=400 {
            for k in -400..=400 {
                let (a, b) = (a0 + i as f64 * 1e-3, b0 + k as f64 * 1e-3);
                let r = residual(a, b);
                if r < best {
                    best = r;
                    arg = (a, b);
                }
            }
        }
        let zero = Vector3::zeros();
        let pin = |v: f64| Vector3::new(0.0, 0.0, v);
        let limits = JointLimits {
            min: vec![zero, pin(-1.6), pin(-1.6), zero],
            max: vec![zero, pin(1.6), pin(1.6), zero],
            t_min: zero,
            t_max: zero,
        };
        let start = PoseFrame::from_matrices(
            &[
                Matrix3::identity(),
                euler_to_matrix(&pin(a0 + 0.15)),
                euler_to_matrix(&pin(b0 - 0.15)),
                Matrix3::identity(),
            ],
            zero,
        )
        .unwrap();
        let problem = RefinementProblem {
            skeleton: s.clone(),
            cameras: vec![cam.clone()],
            initial: MotionSequence {
                fps: 30.0,
                frames: vec![start],
            },
            targets: vec![vec![zero; 4]],
            observations: vec![ObservationFrame {
                keypoints: vec![KeypointObservation {
                    camera: 0,
                    p: p.clone(),
                    sigma: sigma.clone(),
                    p_c: vec![Vector2::zeros(); 4],
                }],
                imu_orientations: vec![],
                imu_accelerations: vec![],
                est_accelerations: vec![],
            }],
            input_sensors: vec![],
            extra_sensors: vec![],
            weights: EnergyWeights {
                w3d: 0.0,
                w2d: 1.0,
                acc: 0.0,
                ori: 0.0,
            },
            limits,
            window: DEFAULT_WINDOW,
        };
        let r = refine(&problem).unwrap();
        let (e, _) = motion_to_euler(&r.motion).unwrap();
        let (a, b) = (e.frames[0].angles[1].z, e.frames[0].angles[2].z);
        assert!(
            (a - arg.0).abs() <= 2e-3 && (b - arg.1).abs() <= 2e-3,
            "trial {trial}: lm ({a}, {b}) grid ({}, {}) energies {:?}",
            arg.0,
            arg.1,
            r.trace[0].energies
        );
    }
}

#[test]
fn refinement_recovers_jittered_ground_truth() {
    let d = dataset(NoiseSpec::zero(), 30, 5);
    let s = &d.manifest.skeleton;
    let gt = gt_motion(&d);
    let init = jittered(&gt, &JointLimits::from_skeleton(s), 5.0, 5);
    // accelerations of extra sensors would come from the jittered start,
    // so only the input sensors constrain the motion here
    let mut p = problem_from(&d, &init, &[d.manifest.inference_camera]);
    p.extra_sensors.clear();
    p.observations.iter_mut().for_each(|o| o.est_accelerations.clear());
    let r = refine(&p).unwrap();
    let before = root_aligned_mpjpe(s, &init, &gt);
    let after = root_aligned_mpjpe(s, &r.motion, &gt);
    assert!(after <= 0.3 * before, "before {before} after {after}");
}

