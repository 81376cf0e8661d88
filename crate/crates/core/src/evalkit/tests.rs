use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{NdArray, ParamBlock};
use crate::error::Error;
use crate::model::{encode_detached, Rays, SceneInput, SemanticFlowModel};
use crate::trainer::{check_config, check_scene, LabelSchedule};

#[test]
fn pixel_metric_examples() {
    let gt = [0u8, 1, 2, 2, 1, 0];
    let m = pixel_metrics(&gt, &gt, 3).unwrap();
    assert_eq!((m.total_acc, m.avg_acc, m.miou), (1.0, 1.0, 1.0));
    let m = pixel_metrics(&[1; 6], &[0; 6], 2).unwrap();
    assert_eq!((m.total_acc, m.miou), (0.0, 0.0));
    assert!(matches!(
        pixel_metrics(&[0, 1], &[0], 2),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        pixel_metrics(&[0, 3], &[0, 1], 3),
        Err(Error::OutOfRange(_))
    ));
}

/// Counts by direct enumeration for every class.
fn brute_force(pred: &[u8], gt: &[u8], l: u8) -> (f64, f64, f64) {
    let n = gt.len() as f64;
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64;
    let mut recalls = Vec::new();
    let mut ious = Vec::new();
    for c in 0..l {
        let in_gt = gt.iter().filter(|&&g| g == c).count();
        let in_pred = pred.iter().filter(|&&p| p == c).count();
        let both = pred
            .iter()
            .zip(gt)
            .filter(|&(&p, &g)| p == c && g == c)
            .count();
        if in_gt > 0 {
            recalls.push(both as f64 / in_gt as f64);
        }
        if in_gt + in_pred > 0 {
            ious.push(both as f64 / (in_gt + in_pred - both) as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (correct / n, mean(&recalls), mean(&ious))
}

#[test]
fn pixel_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let l: u8 = rng.gen_range(2..6);
        let gt: Vec<u8> = (0..64).map(|_| rng.gen_range(0..l)).collect();
        let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..l)).collect();
        let m = pixel_metrics(&pred, &gt, l as usize).unwrap();
        let (a, b, c) = brute_force(&pred, &gt, l);
        assert_eq!((m.total_acc, m.avg_acc, m.miou), (a, b, c));
    }
}

#[test]
fn confusion_matrix_bookkeeping() {
    let mut m = ConfusionMatrix::from_labels(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
    assert_eq!(
        (m.get(0, 0), m.get(0, 1), m.get(1, 1), m.get(1, 0)),
        (1, 1, 1, 0)
    );
    assert_eq!((m.total(), m.trace()), (3, 2));
    let other = m.clone();
    m.merge(&other);
    assert_eq!(m.total(), 6);
}

proptest! {
    #[test]
    fn metrics_invariant_under_class_swap(
        pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..80),
        a in 0u8..4,
        b in 0u8..4,
    ) {
        let swap = |c: u8| if c == a { b } else if c == b { a } else { c };
        let (pred, gt): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let m1 = pixel_metrics(&pred, &gt, 4).unwrap();
        let sp: Vec<u8> = pred.iter().map(|&c| swap(c)).collect();
        let sg: Vec<u8> = gt.iter().map(|&c| swap(c)).collect();
        let m2 = pixel_metrics(&sp, &sg, 4).unwrap();
        prop_assert!((m1.total_acc - m2.total_acc).abs() < 1e-12);
        prop_assert!((m1.avg_acc - m2.avg_acc).abs() < 1e-12);
        prop_assert!((m1.miou - m2.miou).abs() < 1e-12);
    }
}

fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Vec<f32> {
    (0..w * h * 3).map(|_| rng.gen()).collect()
}

#[test]
fn psnr_examples() {
    let a = vec![0.0f32; 3 * 16 * 16];
    let b = vec![0.1f32; 3 * 16 * 16];
    let m = image_metrics(&a, &a, 16, 16).unwrap();
    assert_eq!(m.psnr, PSNR_CAP);
    assert!((m.ssim - 1.0).abs() < 1e-12);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    assert!(matches!(
        image_metrics(&a, &b[1..], 16, 16),
        Err(Error::Shape(_))
    ));
}

/// Direct 2-D windowed SSIM, evaluated per window position.
fn reference_ssim(x: &[f32], y: &[f32], w: usize, h: usize) -> f64 {
    let sigma = 1.5f64;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut per_channel = 0.0;
    for ch in 0..3 {
        let px = |img: &[f32], r: usize, c: usize| f64::from(img[(r * w + c) * 3 + ch]);
        let mut acc = 0.0;
        let mut count = 0;
        for r0 in 0..=h - 11 {
            for c0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = win[i][j] / total;
                        let (a, b) = (px(x, r0 + i, c0 + j), px(y, r0 + i, c0 + j));
                        mx += k * a;
                        my += k * b;
                        sxx += k * a * a;
                        syy += k * b * b;
                        sxy += k * a * b;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / 3.0
}

#[test]
fn ssim_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (w, h) in [(16, 16), (23, 13)] {
        let a = random_image(&mut rng, w, h);
        let b: Vec<f32> = a
            .iter()
            .map(|&v| (v + rng.gen_range(-0.2..0.2f32)).clamp(0.0, 1.0))
            .collect();
        let got = ssim(&a, &b, w, h).unwrap();
        let want = reference_ssim(&a, &b, w, h);
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }
    let a = random_image(&mut rng, 8, 8);
    assert!(ssim(&a, &a, 8, 8).is_err());
}

#[test]
fn epe_examples() {
    let pred = [1.0f32, 0.0, 3.0, 4.0, 9.0, 9.0];
    let gt = [0.0f32, 0.0, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(
        mean_epe(&pred, &gt, &[true, true, false]).unwrap(),
        Some(3.0)
    );
    assert_eq!(mean_epe(&pred, &gt, &[false; 3]).unwrap(), None);
    assert!(mean_epe(&pred, &gt, &[true]).is_err());
}

fn random_blocks(rng: &mut impl Rng) -> Vec<ParamBlock<f32>> {
    let mut blocks = Vec::new();
    for b in 0..rng.gen_range(1..4) {
        let mut p = ParamBlock::new(format!("b{b}"));
        for t in 0..rng.gen_range(1..4) {
            let rank = rng.gen_range(0..4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
            let data = NdArray::from_fn(&shape, |_| f32::from_bits(rng.gen::<u32>() & 0xbfff_ffff));
            p.insert(format!("t{t}"), data).unwrap();
        }
        blocks.push(p);
    }
    blocks
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let blocks = random_blocks(&mut rng);
        let bytes = encode_checkpoint(&blocks).unwrap();
        let entries = decode_checkpoint(Path::new("mem"), &bytes).unwrap();
        let mut back: Vec<ParamBlock<f32>> = blocks
            .iter()
            .map(|b| {
                let mut p = ParamBlock::new(b.name.clone());
                for (n, t) in b.iter() {
                    p.insert(n.clone(), NdArray::zeros(t.shape())).unwrap();
                }
                p
            })
            .collect();
        load_into(Path::new("mem"), entries, &mut back).unwrap();
        for (a, b) in blocks.iter().zip(&back) {
            for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
                assert_eq!(x.shape(), y.shape());
                assert!(x
                    .data()
                    .iter()
                    .zip(y.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }
}

#[test]
fn hand_assembled_file_decodes() {
    let mut bytes = b"SFCK".to_vec();
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(5u32.to_le_bytes());
    bytes.extend(b"a.b.c");
    bytes.extend(2u32.to_le_bytes());
    bytes.extend(2u32.to_le_bytes());
    bytes.extend(3u32.to_le_bytes());
    for v in [1.0f32, -2.5, 0.0, 3.25, 1e-3, -0.0] {
        bytes.extend(v.to_le_bytes());
    }
    let e = decode_checkpoint(Path::new("x"), &bytes).unwrap();
    assert_eq!(e.len(), 1);
    assert_eq!(e[0].name, "a.b.c");
    assert_eq!(e[0].shape, vec![2, 3]);
    assert_eq!(e[0].data, vec![1.0, -2.5, 0.0, 3.25, 1e-3, -0.0]);

    let mut block = ParamBlock::<f64>::new("a");
    block.insert("b.c", NdArray::zeros(&[2, 3])).unwrap();
    let mut blocks = [block];
    load_into(Path::new("x"), e, &mut blocks).unwrap();
    assert_eq!(blocks[0].get("b.c").unwrap().data()[3], 3.25);
}

fn one_tensor_file() -> Vec<u8> {
    let mut b = ParamBlock::<f32>::new("blk");
    b.insert("w", NdArray::new(vec![2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    encode_checkpoint(&[b]).unwrap()
}

#[test]
fn corrupt_files_give_typed_errors() {
    let good = one_tensor_file();
    let p = Path::new("f.sfck");
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_checkpoint(p, &bad),
        Err(Error::Malformed { .. })
    ));
    let mut bad = good.clone();
    bad[4] = 2;
    match decode_checkpoint(p, &bad) {
        Err(Error::Malformed { reason, .. }) => assert!(reason.contains("version")),
        other => panic!("{other:?}"),
    }
    for cut in [3, 10, good.len() - 1] {
        match decode_checkpoint(p, &good[..cut]) {
            Err(Error::Malformed { reason, .. }) => {
                assert!(reason.contains("truncated"), "{reason}")
            }
            other => panic!("{other:?}"),
        }
    }
    let mut bad = good.clone();
    bad.push(0);
    assert!(matches!(
        decode_checkpoint(p, &bad),
        Err(Error::Malformed { .. })
    ));
}

#[test]
fn strict_load_rejects_mismatches() {
    let p = Path::new("f.sfck");
    let entries = decode_checkpoint(p, &one_tensor_file()).unwrap();
    let mut other = ParamBlock::<f32>::new("blk");
    other.insert("v", NdArray::zeros(&[2])).unwrap();
    assert!(load_into(p, entries.clone(), &mut [other]).is_err());
    let mut extra = ParamBlock::<f32>::new("blk");
    extra.insert("w", NdArray::zeros(&[2])).unwrap();
    let mut more = entries.clone();
    more.push(CheckpointEntry {
        name: "blk.ghost".into(),
        shape: vec![1],
        data: vec![0.0],
    });
    assert!(
        matches!(load_into(p, more, &mut [extra.clone()]), Err(Error::UnknownTensor(n)) if n == "blk.ghost")
    );
    let mut wrong = ParamBlock::<f32>::new("blk");
    wrong.insert("w", NdArray::zeros(&[3])).unwrap();
    assert!(matches!(
        load_into(p, entries, &mut [wrong]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn duplicate_names_are_rejected() {
    let mut a = ParamBlock::<f32>::new("x");
    a.insert("y.z", NdArray::zeros(&[1])).unwrap();
    let mut b = ParamBlock::<f32>::new("x.y");
    b.insert("z", NdArray::zeros(&[1])).unwrap();
    assert!(encode_checkpoint(&[a, b]).is_err());
}

#[test]
fn model_files_round_trip_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sfck");
    let mut cfg = check_config();
    cfg.attention = false;
    let m = SemanticFlowModel::<f32>::new(cfg, 3).unwrap();
    let data = vec![dir.path().join("a"), dir.path().join("b")];
    save_model(&path, &m, &data).unwrap();
    assert!(sidecar_path(&path).exists());
    let back = load_model::<f32>(&path).unwrap();
    assert_eq!(back.model, m);
    assert_eq!(back.data, data);
    std::fs::remove_file(sidecar_path(&path)).unwrap();
    assert!(matches!(load_model::<f32>(&path), Err(Error::Io { .. })));
}

struct Fixture {
    model: SemanticFlowModel<f64>,
    scene: SceneInput,
    maps: crate::model::DetachedScene<f64>,
    rays: Rays,
}

fn fixture() -> Fixture {
    let data = check_scene().unwrap();
    let scene = SceneInput::from_scene(&data);
    let model = SemanticFlowModel::new(check_config(), 8).unwrap();
    let maps = encode_detached(&model, &scene).unwrap();
    let frames: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let pixels: Vec<(usize, usize)> = (0..40).map(|i| ((i * 7) % 16, (i * 5) % 16)).collect();
    let rays = Rays::from_pixels(&scene, &frames, &pixels);
    Fixture {
        model,
        scene,
        maps,
        rays,
    }
}

#[test]
fn empty_edit_is_identity() {
    let f = fixture();
    let plain = render_rays(
        &f.model,
        &f.scene,
        &f.maps,
        &f.rays,
        &RenderOptions::default(),
    )
    .unwrap();
    let edited = render_rays(
        &f.model,
        &f.scene,
        &f.maps,
        &f.rays,
        &RenderOptions {
            remove: vec![],
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(plain, edited);
    assert!(plain
        .labels
        .iter()
        .all(|&c| usize::from(c) < f.model.config.classes));
    let again = render_rays(
        &f.model,
        &f.scene,
        &f.maps,
        &f.rays,
        &RenderOptions::default(),
    )
    .unwrap();
    assert_eq!(plain, again);
}

#[test]
fn removing_every_class_matches_static_render() {
    let f = fixture();
    let all: Vec<u8> = (0..f.model.config.classes as u8).collect();
    let edited = render_rays(
        &f.model,
        &f.scene,
        &f.maps,
        &f.rays,
        &RenderOptions {
            remove: all,
            ..Default::default()
        },
    )
    .unwrap();
    // Removing every class turns each sample into a purely static one.
    let st = render_rays(
        &f.model,
        &f.scene,
        &f.maps,
        &f.rays,
        &RenderOptions {
            static_only: true,
            ..Default::default()
        },
    )
    .unwrap();
    let plain = render_rays(
        &f.model,
        &f.scene,
        &f.maps,
        &f.rays,
        &RenderOptions::default(),
    )
    .unwrap();
    assert_ne!(plain.rgb, edited.rgb);
    for (a, b) in edited
        .rgb
        .iter()
        .zip(&st.rgb)
        .chain(edited.probs.iter().zip(&st.probs))
    {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!(matches!(
        render_rays(
            &f.model,
            &f.scene,
            &f.maps,
            &f.rays,
            &RenderOptions {
                remove: vec![9],
                ..Default::default()
            }
        ),
        Err(Error::OutOfRange(_))
    ));
}

#[test]
fn chunking_does_not_change_results() {
    let f = fixture();
    let opts = RenderOptions {
        flow: true,
        ..Default::default()
    };
    let whole = render_rays(&f.model, &f.scene, &f.maps, &f.rays, &opts).unwrap();
    let split = render_rays(
        &f.model,
        &f.scene,
        &f.maps,
        &f.rays,
        &RenderOptions { chunk: 7, ..opts },
    )
    .unwrap();
    for (a, b) in whole
        .rgb
        .iter()
        .zip(&split.rgb)
        .chain(whole.probs.iter().zip(&split.probs))
    {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    let (fa, fb) = (whole.flow.unwrap(), split.flow.unwrap());
    for d in 0..2 {
        for (a, b) in fa[d].iter().zip(&fb[d]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
    let st = render_rays(
        &f.model,
        &f.scene,
        &f.maps,
        &f.rays,
        &RenderOptions {
            static_only: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(st.flow.is_none());
    assert_eq!(st.rgb.len(), 3 * f.rays.len());
}

#[test]
fn views_are_written_and_parsed() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let p = &f.scene.poses[1];
    let mut line: Vec<String> = p
        .rotation
        .iter()
        .flatten()
        .chain(&p.translation)
        .map(|v| v.to_string())
        .collect();
    line.extend([p.fx, p.fy, p.cx, p.cy].iter().map(|v| v.to_string()));
    let text = format!("{}\n\n{} 3\n", line.join(" "), line.join(" "));
    let views = parse_views(Path::new("v"), &text, f.scene.n).unwrap();
    assert_eq!(views.iter().map(|v| v.1).collect::<Vec<_>>(), vec![0, 2]);
    assert!(parse_views(Path::new("v"), &format!("{} 9", line.join(" ")), 4).is_err());
    assert!(parse_views(Path::new("v"), "1 2 3", 4).is_err());

    let out = render_views(
        &f.model,
        &f.scene,
        &f.maps,
        &views,
        dir.path(),
        &RenderOptions::default(),
    )
    .unwrap();
    assert_eq!(out.len(), 2);
    for name in [
        "view_001_rgb.png",
        "view_002_label.png",
        "view_002_prob3.png",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let labels = image::open(dir.path().join("view_001_label.png"))
        .unwrap()
        .to_luma8();
    assert!(labels
        .pixels()
        .all(|p| usize::from(p.0[0]) < f.model.config.classes));
    assert_eq!(labels.into_raw(), out[0].pixels.labels);
    let again = render_views(
        &f.model,
        &f.scene,
        &f.maps,
        &views[..1],
        dir.path(),
        &RenderOptions::default(),
    )
    .unwrap();
    assert_eq!(again[0], out[0]);
}

#[test]
fn evaluation_report_covers_every_frame() {
    let data = check_scene().unwrap();
    let model = SemanticFlowModel::<f32>::new(check_config(), 1).unwrap();
    let rep = evaluate(&model, &data, LabelSchedule::Tracking).unwrap();
    assert_eq!(rep.per_frame.len(), data.n);
    assert_eq!(rep.labeled.as_ref().unwrap().frames, 3);
    assert_eq!(rep.heldout.as_ref().unwrap().frames, 1);
    let csv = rep.to_csv();
    assert_eq!(csv.lines().count(), 1 + data.n + 3);
    assert!(rep.all.psnr.is_finite() && rep.all.epe.unwrap().is_finite());
    let full = evaluate(&model, &data, LabelSchedule::Full).unwrap();
    assert!(full.heldout.is_none());
}
