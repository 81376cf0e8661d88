use super::*;
use crate::diffcore::{gradcheck, sinusoidal_embed, GradcheckConfig, NdArray};
use crate::feature_agg::{encode, EncoderShape};
use crate::renderer::{deltas, sample_depths};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 5;

fn cfg(n: usize) -> FlowFieldConfig {
    FlowFieldConfig {
        width: 8,
        blocks: 1,
        max_step: 0.1,
        pos_freqs: 2,
        time_freqs: 1,
        n_frames: n,
        bounds: ([-3.0, -3.0, 0.5], [3.0, 3.0, 8.0]),
    }
}

fn zeroed(mut p: ParamBlock<f64>) -> ParamBlock<f64> {
    for (_, t) in p.iter_mut() {
        t.data_mut().fill(0.0);
    }
    p
}

fn lin(p: &ParamBlock<f64>, name: &str, x: &[f64], relu: bool) -> Vec<f64> {
    let w = p.get(&format!("{name}.w")).unwrap();
    let b = p.get(&format!("{name}.b")).unwrap();
    let (i, o) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|j| {
            let s = b.data()[j] + (0..i).map(|k| x[k] * w.data()[k * o + j]).sum::<f64>();
            if relu {
                s.max(0.0)
            } else {
                s
            }
        })
        .collect()
}

/// Loop evaluation of the flow field for one point.
fn reference_step(
    c: &FlowFieldConfig,
    p: &ParamBlock<f64>,
    feat: &[f64],
    x: [f64; 3],
    t: usize,
) -> ([f64; 3], [f64; 3]) {
    let mut inp = feat.to_vec();
    inp.extend(sinusoidal_embed(&x, c.pos_freqs, true));
    inp.extend(sinusoidal_embed(
        &[(t + 1) as f64 / c.n_frames as f64],
        c.time_freqs,
        true,
    ));
    let mut h = lin(p, "in", &inp, true);
    for b in 0..c.blocks {
        let a = lin(p, &format!("blk{b}.fc0"), &h, true);
        let d = lin(p, &format!("blk{b}.fc1"), &a, false);
        h.iter_mut().zip(d).for_each(|(v, d)| *v += d);
    }
    let o: Vec<f64> = lin(p, "out", &h, false)
        .iter()
        .map(|v| v.tanh() * c.max_step)
        .collect();
    (
        [0, 1, 2].map(|k| x[k] + o[k]),
        [0, 1, 2].map(|k| x[k] + o[3 + k]),
    )
}

fn random_feature(rng: &mut impl Rng) -> Vec<f64> {
    (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn zero_field_is_identity_motion() {
    let c = cfg(12);
    let p = zeroed(c.init(D, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
    let x = [0.3, -0.2, 2.5];
    let (b, f) = flow_step(&c, &p, &[0.7; D], x, 4).unwrap();
    assert_eq!((b, f), (x, x));
}

#[test]
fn flow_step_matches_reference_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = FlowFieldConfig {
        blocks: 2,
        ..cfg(12)
    };
    let p = c.init::<f64>(D, &mut rng).unwrap();
    for _ in 0..5 {
        let feat = random_feature(&mut rng);
        let x = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(2.0..4.0),
        ];
        let t = rng.gen_range(0..12);
        let (b, f) = flow_step(&c, &p, &feat, x, t).unwrap();
        let (rb, rf) = reference_step(&c, &p, &feat, x, t);
        for k in 0..3 {
            assert!((b[k] - rb[k]).abs() < 1e-12 && (f[k] - rf[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn flow_step_rejects_bad_input() {
    let c = cfg(4);
    let p = c.init::<f64>(D, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(
        flow_step(&c, &p, &[f64::NAN; D], [0.0; 3], 0),
        Err(Error::NonFinite(_))
    ));
    assert!(matches!(
        flow_step(&c, &p, &[0.0; D], [0.0, f64::INFINITY, 1.0], 0),
        Err(Error::NonFinite(_))
    ));
    assert!(matches!(
        flow_step(&c, &p, &[0.0; D], [0.0; 3], 4),
        Err(Error::OutOfRange(_))
    ));
}

#[test]
fn flow_step_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = cfg(6);
    let p = c.init::<f64>(D, &mut rng).unwrap();
    let feat = random_feature(&mut rng);
    let target = [0.2, 0.1, 3.0];
    let report = gradcheck(
        |g, b| {
            let f = g.constant(&[1, D], feat.clone());
            let x = g.constant(&[1, 3], vec![0.1, 0.15, 2.9]);
            let inp = field_input(g, f, x, &[2], c.n_frames, c.pos_freqs, c.time_freqs);
            let (_, fwd) = flow_offsets(g, &b[0], inp, &c)?;
            let phi = g.add(x, fwd);
            let tg = g.constant(&[1, 3], target.to_vec());
            let d = g.sub(phi, tg);
            let sq = g.mul(d, d);
            Ok(g.sum(sq))
        },
        &[p],
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst(3));
}

#[test]
fn trajectory_window_cases() {
    let c = cfg(12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = c.init::<f64>(D, &mut rng).unwrap();
    let x = [0.1, 0.2, 3.0];
    let feats = |_: [f64; 3], _: usize| vec![0.5; D];
    let t0 = build_trajectory(&c, &p, feats, x, 5, 0).unwrap();
    assert_eq!(t0.positions.iter().flatten().count(), 1);
    assert_eq!(t0.at(5), Some(x));

    let z = zeroed(p.clone());
    let t1 = build_trajectory(&c, &z, feats, x, 5, 1).unwrap();
    assert_eq!((t1.at(4), t1.at(5), t1.at(6)), (Some(x), Some(x), Some(x)));

    let td = build_trajectory(&c, &p, feats, x, 5, DEFAULT_WINDOW).unwrap();
    let frames: Vec<usize> = (0..12).filter(|&f| td.at(f).is_some()).collect();
    assert_eq!(frames, vec![4, 5, 6]);

    // the window is cut at the ends of the video
    let te = build_trajectory(&c, &p, feats, x, 0, 3).unwrap();
    let frames: Vec<usize> = (0..12).filter(|&f| te.at(f).is_some()).collect();
    assert_eq!(frames, vec![0, 1, 2, 3]);
}

#[test]
fn trajectory_chain_reuses_features_at_predicted_positions() {
    let c = cfg(12);
    let p = c.init::<f64>(D, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let x = [0.1, 0.2, 3.0];
    let feats = |q: [f64; 3], t: usize| {
        (0..D)
            .map(|k| q[k % 3] * (k as f64 + 1.0) + t as f64 * 0.1)
            .collect::<Vec<_>>()
    };
    let traj = build_trajectory(&c, &p, feats, x, 5, 2).unwrap();
    let (_, f1) = reference_step(&c, &p, &feats(x, 5), x, 5);
    let (_, f2) = reference_step(&c, &p, &feats(f1, 6), f1, 6);
    let (b1, _) = reference_step(&c, &p, &feats(x, 5), x, 5);
    let (b2, _) = reference_step(&c, &p, &feats(b1, 4), b1, 4);
    for (got, want) in [
        (traj.at(6), f1),
        (traj.at(7), f2),
        (traj.at(4), b1),
        (traj.at(3), b2),
    ] {
        let got = got.unwrap();
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn trajectory_leaving_bounds_is_flagged() {
    let c = FlowFieldConfig {
        bounds: ([-1.0, -1.0, 0.5], [0.25, 1.0, 5.0]),
        ..cfg(12)
    };
    let mut p = zeroed(c.init(D, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());
    // forward offset saturates at +max_step in x
    p.get_mut("out.b").unwrap().data_mut()[3] = 50.0;
    let traj = build_trajectory(&c, &p, |_, _| vec![0.0; D], [0.0, 0.0, 3.0], 5, 4).unwrap();
    assert!(traj.flagged);
    // x = 0.1, 0.2 stay inside, 0.3 does not
    assert!(traj.at(7).is_some() && traj.at(8).is_none());
    assert!(traj
        .positions
        .iter()
        .flatten()
        .all(|q| q.iter().all(|v| v.is_finite())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn anchor_position_is_exact(seed in 0u64..1000, x in -1.0f64..1.0, y in -1.0f64..1.0, z in 1.0f64..5.0, t in 0usize..12, w in 0usize..3) {
        let c = cfg(12);
        let p = c.init::<f64>(D, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let traj = build_trajectory(&c, &p, |q, _| vec![q[0]; D], [x, y, z], t, w).unwrap();
        prop_assert_eq!(traj.at(t), Some([x, y, z]));
    }

    #[test]
    fn zero_field_is_identity_everywhere(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 1.0f64..5.0, t in 0usize..12) {
        let c = cfg(12);
        let p = zeroed(c.init(D, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());
        let (b, f) = flow_step(&c, &p, &[0.3; D], [x, y, z], t).unwrap();
        prop_assert_eq!(b, [x, y, z]);
        prop_assert_eq!(f, [x, y, z]);
    }
}

fn still_trajectory(x: [f64; 3], t: usize, n: usize) -> Trajectory<f64> {
    let mut positions = vec![None; n];
    for f in t.saturating_sub(1)..(t + 2).min(n) {
        positions[f] = Some(x);
    }
    Trajectory {
        anchor: t,
        window: 1,
        positions,
        flagged: false,
    }
}

fn forward_ray(pose: &CameraPose<f64>, row: usize, col: usize, frame: usize) -> Ray<f64> {
    let d = pose.ray_direction(col as f64 + 0.5, row as f64 + 0.5);
    Ray::new(pose.center(), d, 2.0, 5.0, (row, col), frame).unwrap()
}

#[test]
fn still_scene_and_camera_render_zero_flow() {
    let pose = CameraPose::looking_forward([0.0; 3], 20.0, 8.0, 8.0);
    let poses = vec![pose; 3];
    let ray = forward_ray(&pose, 5, 3, 1);
    let depths = sample_depths(2.0, 5.0, 8, false, &mut ChaCha8Rng::seed_from_u64(0));
    let trajs: Vec<_> = depths
        .iter()
        .map(|&d| still_trajectory(ray.at(d), 1, 3))
        .collect();
    let sigma = vec![0.7; 8];
    let [f, b] = render_optical_flow(&ray, &depths, &sigma, &trajs, &poses, true).unwrap();
    for v in f.unwrap().into_iter().chain(b.unwrap()) {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn opaque_sample_renders_its_own_displacement() {
    let pose = CameraPose::looking_forward([0.0; 3], 20.0, 8.0, 8.0);
    let poses = vec![pose; 3];
    let ray = forward_ray(&pose, 4, 6, 1);
    let depths = sample_depths(2.0, 5.0, 6, false, &mut ChaCha8Rng::seed_from_u64(0));
    let mut trajs: Vec<_> = depths
        .iter()
        .map(|&d| still_trajectory(ray.at(d), 1, 3))
        .collect();
    let moved = [0.3, -0.1, 3.4];
    trajs[2].positions[2] = Some(moved);
    let mut sigma = vec![0.0; 6];
    // normalised weights put the full mass on the single sample, whatever its density
    let (u, v, _) = pose.project(moved);
    let want = [u - 6.5, v - 4.5];
    for s in [1e3, 1.0, 0.05] {
        sigma[2] = s;
        let [f, _] = render_optical_flow(&ray, &depths, &sigma, &trajs, &poses, true).unwrap();
        let f = f.unwrap();
        for k in 0..2 {
            assert!(
                (f[k] - want[k]).abs() < 1e-5 * want[k].abs().max(1.0),
                "{f:?} {want:?}"
            );
        }
    }
}

#[test]
fn rendered_flow_matches_dense_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let poses: Vec<_> = (0..3)
        .map(|k| CameraPose::looking_forward([0.1 * k as f64, 0.0, 0.0], 20.0, 8.0, 8.0))
        .collect();
    let ray = forward_ray(&poses[1], 7, 2, 1);
    let m = 10;
    let depths = sample_depths(2.0, 5.0, m, true, &mut rng);
    let trajs: Vec<_> = depths
        .iter()
        .map(|&d| {
            let x = ray.at(d);
            let mut t = still_trajectory(x, 1, 3);
            for f in [0, 2] {
                t.positions[f] = Some([0, 1, 2].map(|k| x[k] + rng.gen_range(-0.2..0.2)));
            }
            t
        })
        .collect();
    let sigma: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..3.0)).collect();
    for normalize in [true, false] {
        let [f, b] = render_optical_flow(&ray, &depths, &sigma, &trajs, &poses, normalize).unwrap();
        // dense sum with explicit transmittance products
        let dl = deltas(&depths, ray.last_delta(m));
        for (got, frame) in [(f.unwrap(), 2), (b.unwrap(), 0)] {
            let mut acc = [0.0; 2];
            let mut total = 0.0;
            for i in 0..m {
                let trans: f64 = (0..i).map(|j| (-sigma[j] * dl[j]).exp()).product();
                let w = trans * (1.0 - (-sigma[i] * dl[i]).exp());
                let (u, v, _) = poses[frame].project(trajs[i].at(frame).unwrap());
                acc[0] += w * (u - 2.5);
                acc[1] += w * (v - 7.5);
                total += w;
            }
            let norm = if normalize { total + 1e-8 } else { 1.0 };
            assert!((got[0] - acc[0] / norm).abs() < 1e-6);
            assert!((got[1] - acc[1] / norm).abs() < 1e-6);
        }
    }
}

#[test]
fn behind_camera_samples_are_excluded() {
    let pose = CameraPose::looking_forward([0.0; 3], 20.0, 8.0, 8.0);
    let poses = vec![pose; 2];
    let ray = forward_ray(&pose, 8, 8, 0);
    let depths = vec![2.5, 3.5];
    let mut trajs: Vec<_> = depths
        .iter()
        .map(|&d| still_trajectory(ray.at(d), 0, 2))
        .collect();
    trajs[0].positions[1] = Some([0.0, 0.0, -1.0]);
    let [f, b] = render_optical_flow(&ray, &depths, &[1.0, 1.0], &trajs, &poses, true).unwrap();
    assert!(b.is_none());
    assert!(f.unwrap().iter().all(|v| v.abs() < 1e-9));
    // no usable sample at all
    trajs[1].positions[1] = Some([0.0, 0.0, -2.0]);
    let [f, _] = render_optical_flow(&ray, &depths, &[1.0, 1.0], &trajs, &poses, true).unwrap();
    assert!(f.is_none());
}

#[test]
fn warp_ray_cases() {
    let c = cfg(12);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = c.init::<f64>(D, &mut rng).unwrap();
    let z = zeroed(p.clone());
    let pts: Vec<[f64; 3]> = (0..4)
        .map(|i| [0.1 * i as f64, 0.0, 2.5 + 0.3 * i as f64])
        .collect();
    let feats = |_: [f64; 3], _: usize| vec![0.2; D];
    let trajs: Vec<_> = pts
        .iter()
        .map(|&x| build_trajectory(&c, &p, feats, x, 6, 1).unwrap())
        .collect();
    assert_eq!(warp_ray(&trajs, 6).unwrap(), pts);
    let still: Vec<_> = pts
        .iter()
        .map(|&x| build_trajectory(&c, &z, feats, x, 6, 1).unwrap())
        .collect();
    assert_eq!(warp_ray(&still, 7).unwrap(), pts);
    let w = warp_ray(&trajs, 5).unwrap();
    for (got, t) in w.iter().zip(&trajs) {
        assert_eq!(Some(*got), t.positions[5]);
    }
    assert!(matches!(warp_ray(&trajs, 8), Err(Error::OutOfRange(_))));
}

/// Small batched setup: 3 frames of random 8x8 images and forward cameras.
struct Batch {
    cfg: FlowFieldConfig,
    images: Vec<f64>,
    poses: Rc<[CameraPose<f64>]>,
    enc: EncoderShape,
}

impl Batch {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        Batch {
            cfg: cfg(3),
            images: (0..3 * 8 * 8 * 3)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
            poses: (0..3)
                .map(|k| CameraPose::looking_forward([0.05 * k as f64, 0.0, 0.0], 10.0, 4.0, 4.0))
                .collect::<Vec<_>>()
                .into(),
            enc: EncoderShape::new(4, D),
        }
    }

    fn run(
        &self,
        g: &mut Graph<f64>,
        flow: &BoundBlock,
        enc: &BoundBlock,
        points: &[f64],
        anchors: &[usize],
        window: usize,
    ) -> Result<TrajectoryBatch> {
        let img = g.constant(&[3 * 8 * 8, 3], self.images.clone());
        let maps = encode(g, enc, img, 3, 8, 8, 3)?;
        let ctx = TrajectoryContext {
            cfg: &self.cfg,
            psi_flow: flow,
            e_dy: enc,
            maps: &maps,
            poses: self.poses.clone(),
        };
        let x = g.constant(&[anchors.len(), 3], points.to_vec());
        Ok(trajectories_from_points(g, &ctx, x, anchors.into(), window)?.0)
    }
}

fn ray_points(
    b: &Batch,
    rays: &[(usize, usize, usize)],
    depths: &[f64],
) -> (Vec<f64>, Vec<usize>, Vec<[f64; 2]>) {
    let mut pts = Vec::new();
    let mut anchors = Vec::new();
    let mut pixels = Vec::new();
    for &(row, col, f) in rays {
        let ray = forward_ray(&b.poses[f], row, col, f);
        for &d in depths {
            pts.extend(ray.at(d));
            anchors.push(f);
        }
        pixels.push([col as f64 + 0.5, row as f64 + 0.5]);
    }
    (pts, anchors, pixels)
}

#[test]
fn batched_trajectories_match_single_point_chains() {
    let b = Batch::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let flow = b.cfg.init::<f64>(D, &mut rng).unwrap();
    let enc = b.enc.init::<f64>("e_dy", &mut rng).unwrap();
    let pts = [0.1, -0.1, 2.5, -0.2, 0.3, 3.0];
    let anchors = [1, 0];
    let mut g = Graph::new();
    let (fb, eb) = (bind(&mut g, &flow, false), bind(&mut g, &enc, false));
    let traj = b.run(&mut g, &fb, &eb, &pts, &anchors, 2).unwrap();
    assert_eq!(
        traj.rows.iter().map(|r| r.offset).collect::<Vec<_>>(),
        vec![-2, -1, 0, 1, 2]
    );

    // single-point chain with features sampled on the same maps
    let mut fg = Graph::new();
    let e2 = bind(&mut fg, &enc, false);
    let img = fg.constant(&[3 * 8 * 8, 3], b.images.clone());
    let maps = encode(&mut fg, &e2, img, 3, 8, 8, 3).unwrap();
    let mut feats = |q: [f64; 3], t: usize| {
        let x = fg.constant(&[1, 3], q.to_vec());
        let (uv, _) = project_points(&mut fg, x, b.poses.clone(), vec![t].into());
        let f = sample_features(&mut fg, &e2, &maps, uv, vec![t].into()).unwrap();
        fg.value(f).to_vec()
    };
    for (p, &t) in anchors.iter().enumerate() {
        let x = [pts[3 * p], pts[3 * p + 1], pts[3 * p + 2]];
        let single = build_trajectory(&b.cfg, &flow, &mut feats, x, t, 2).unwrap();
        for row in &traj.rows {
            let frame = t as isize + row.offset;
            let want = (0..3)
                .contains(&frame)
                .then(|| single.at(frame as usize))
                .flatten();
            assert_eq!(
                row.valid[p],
                want.is_some(),
                "point {p} offset {}",
                row.offset
            );
            if let Some(w) = want {
                let got = &g.value(row.positions)[3 * p..3 * p + 3];
                for k in 0..3 {
                    assert!((got[k] - w[k]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn warp_positions_picks_rows() {
    let b = Batch::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let flow = b.cfg.init::<f64>(D, &mut rng).unwrap();
    let enc = b.enc.init::<f64>("e_dy", &mut rng).unwrap();
    let pts = [0.1, -0.1, 2.5, -0.2, 0.3, 3.0, 0.0, 0.0, 4.0];
    let mut g = Graph::new();
    let (fb, eb) = (bind(&mut g, &flow, false), bind(&mut g, &enc, false));
    let traj = b.run(&mut g, &fb, &eb, &pts, &[1, 1, 2], 1).unwrap();
    let w = warp_positions(&mut g, &traj, &[-1, 0, 1]).unwrap();
    for (p, off) in [(0usize, -1isize), (1, 0), (2, 1)] {
        let row = traj.row(off).unwrap();
        assert_eq!(
            &g.value(w)[3 * p..3 * p + 3],
            &g.value(row.positions)[3 * p..3 * p + 3]
        );
    }
    assert!(matches!(
        warp_positions(&mut g, &traj, &[2, 0, 0]),
        Err(Error::OutOfRange(_))
    ));
}

#[test]
fn batched_flow_render_matches_plain_render() {
    let b = Batch::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let flow = b.cfg.init::<f64>(D, &mut rng).unwrap();
    let enc = b.enc.init::<f64>("e_dy", &mut rng).unwrap();
    let m = 6;
    let depths = sample_depths(2.0, 5.0, m, false, &mut rng);
    let rays = [(3, 4, 1), (6, 1, 1)];
    let (pts, anchors, pixels) = ray_points(&b, &rays, &depths);
    let sigma: Vec<f64> = (0..pts.len() / 3)
        .map(|_| rng.gen_range(0.0..2.0))
        .collect();
    let dl: Vec<f64> = rays
        .iter()
        .flat_map(|_| deltas(&depths, 3.0 / m as f64))
        .collect();
    let mut g = Graph::new();
    let (fb, eb) = (bind(&mut g, &flow, false), bind(&mut g, &enc, false));
    let traj = b.run(&mut g, &fb, &eb, &pts, &anchors, 1).unwrap();
    let s = g.constant(&[sigma.len()], sigma.clone());
    for (slot, off) in [(0usize, 1isize), (1, -1)] {
        let out =
            render_flow_batch(&mut g, &traj, off, s, dl.clone().into(), &pixels, m, true).unwrap();
        let row = traj.row(off).unwrap();
        for (r, &(pr, pc, f)) in rays.iter().enumerate() {
            let ray = forward_ray(&b.poses[f], pr, pc, f);
            let trajs: Vec<_> = (0..m)
                .map(|i| {
                    let p = r * m + i;
                    let mut t = still_trajectory([0.0; 3], f, 3);
                    t.positions[f] = Some([0, 1, 2].map(|k| pts[3 * p + k]));
                    let q = &g.value(row.positions)[3 * p..3 * p + 3];
                    t.positions[row.frames[p]] = Some([q[0], q[1], q[2]]);
                    t
                })
                .collect();
            let plain = render_optical_flow(
                &ray,
                &depths,
                &sigma[r * m..(r + 1) * m],
                &trajs,
                &b.poses,
                true,
            )
            .unwrap();
            let want = plain[slot].unwrap();
            for k in 0..2 {
                assert!((g.value(out)[2 * r + k] - want[k]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn flow_loss_gradients_reach_field_encoder_and_density() {
    let b = Batch::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let flow = b.cfg.init::<f64>(D, &mut rng).unwrap();
    let enc = b.enc.init::<f64>("e_dy", &mut rng).unwrap();
    let m = 4;
    let depths = sample_depths(2.0, 5.0, m, false, &mut rng);
    let rays = [(3, 4, 1), (5, 2, 1)];
    let (pts, anchors, pixels) = ray_points(&b, &rays, &depths);
    let mut dens = ParamBlock::new("sigma");
    let s0: Vec<f64> = (0..pts.len() / 3)
        .map(|_| rng.gen_range(0.2..2.0))
        .collect();
    dens.insert("s", NdArray::new(vec![s0.len()], s0).unwrap())
        .unwrap();
    let dl: Rc<[f64]> = rays
        .iter()
        .flat_map(|_| deltas(&depths, 0.75))
        .collect::<Vec<_>>()
        .into();
    let target: Rc<[f64]> = vec![0.3, -0.2, 0.1, 0.4].into();
    let cfg = GradcheckConfig {
        coords_per_tensor: 3,
        ..Default::default()
    };
    let report = gradcheck(
        |g, p| {
            let traj = b.run(g, &p[0], &p[1], &pts, &anchors, 1)?;
            let s = p[2].get("s")?;
            let fwd = render_flow_batch(g, &traj, 1, s, dl.clone(), &pixels, m, true)?;
            let bwd = render_flow_batch(g, &traj, -1, s, dl.clone(), &pixels, m, false)?;
            let a = g.l1(fwd, target.clone(), None);
            let c = g.mse(bwd, target.clone(), None);
            Ok(g.add(a, c))
        },
        &[flow, enc, dens],
        &cfg,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst(3));
    for t in ["psi_flow", "e_dy", "sigma"] {
        assert!(
            report
                .entries
                .iter()
                .any(|e| e.tensor.starts_with(t) && e.analytic != 0.0),
            "{t}"
        );
    }
}
