//! Dataset directory codec.
//!
//! ```text
//! frames/frame_###.png   8-bit RGB
//! labels/label_###.png   8-bit gray, value = class id
//! flow/fwd_###.bin       "SFLO" u32 w u32 h, then (dx, dy) f32 LE per pixel, row-major
//! flow/bwd_###.bin
//! depth/depth_###.bin    "SDEP" u32 w u32 h, then f32 LE per pixel
//! poses.txt              9 rotation (row-major), 3 translation, fx fy cx cy
//! meta.txt               key=value
//! ```
//! Frame numbers in file names are 1-based.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};

use super::camera::CameraPose;
use super::SyntheticScene;
use crate::error::{Error, Result};

const FLOW_MAGIC: &[u8; 4] = b"SFLO";
const DEPTH_MAGIC: &[u8; 4] = b"SDEP";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn encode_grid(magic: &[u8; 4], width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * values.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_grid(
    path: &Path,
    magic: &[u8; 4],
    per_pixel: usize,
    bytes: &[u8],
) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 12 {
        return Err(Error::malformed(path, "truncated header"));
    }
    if &bytes[..4] != magic {
        return Err(Error::malformed(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4],
                std::str::from_utf8(magic).unwrap()
            ),
        ));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4 * per_pixel))
        .ok_or_else(|| Error::malformed(path, "dimensions overflow"))?;
    let body = &bytes[12..];
    if body.len() != expected {
        return Err(Error::malformed(
            path,
            format!(
                "{w}x{h} needs {expected} payload bytes, found {}",
                body.len()
            ),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((w, h, values))
}

pub fn write_flow_file(path: &Path, width: usize, height: usize, flow: &[f32]) -> Result<()> {
    assert_eq!(flow.len(), 2 * width * height);
    write_file(path, &encode_grid(FLOW_MAGIC, width, height, flow))
}

/// `(width, height, interleaved dx/dy)`.
pub fn read_flow_file(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode_grid(path, FLOW_MAGIC, 2, &read_file(path)?)
}

pub fn write_depth_file(path: &Path, width: usize, height: usize, depth: &[f32]) -> Result<()> {
    assert_eq!(depth.len(), width * height);
    write_file(path, &encode_grid(DEPTH_MAGIC, width, height, depth))
}

pub fn read_depth_file(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode_grid(path, DEPTH_MAGIC, 1, &read_file(path)?)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_dataset(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    let (w, h) = (scene.width, scene.height);
    for sub in ["frames", "labels", "flow", "depth"] {
        create_dir(&dir.join(sub))?;
    }
    for f in 0..scene.n {
        let id = f + 1;
        let rgb: Vec<u8> = scene.frames[f].iter().map(|&v| to_byte(v)).collect();
        let path = dir.join(format!("frames/frame_{id:03}.png"));
        RgbImage::from_raw(w as u32, h as u32, rgb)
            .expect("frame buffer size")
            .save(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        let path = dir.join(format!("labels/label_{id:03}.png"));
        GrayImage::from_raw(w as u32, h as u32, scene.labels[f].clone())
            .expect("label buffer size")
            .save(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        write_flow_file(
            &dir.join(format!("flow/fwd_{id:03}.bin")),
            w,
            h,
            &scene.flow_fwd[f],
        )?;
        write_flow_file(
            &dir.join(format!("flow/bwd_{id:03}.bin")),
            w,
            h,
            &scene.flow_bwd[f],
        )?;
        write_depth_file(
            &dir.join(format!("depth/depth_{id:03}.bin")),
            w,
            h,
            &scene.depth[f],
        )?;
    }
    let mut poses = String::new();
    for p in &scene.poses {
        let vals: Vec<String> = p
            .rotation
            .iter()
            .flatten()
            .chain(&p.translation)
            .chain([&p.fx, &p.fy, &p.cx, &p.cy])
            .map(|v| v.to_string())
            .collect();
        poses.push_str(&vals.join(" "));
        poses.push('\n');
    }
    write_file(&dir.join("poses.txt"), poses.as_bytes())?;
    let fg: Vec<String> = scene.fg_classes.iter().map(u8::to_string).collect();
    let meta = format!(
        "N={}\nW={}\nH={}\nL={}\nseed={}\nrecipe={}\nfg={}\nnear={}\nfar={}\n",
        scene.n,
        w,
        h,
        scene.classes,
        scene.seed,
        scene.recipe,
        fg.join(","),
        scene.near,
        scene.far
    );
    write_file(&dir.join("meta.txt"), meta.as_bytes())
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub(crate) fn parse_key_values(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::malformed(path, format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn meta_field<T: std::str::FromStr>(
    path: &Path,
    meta: &BTreeMap<String, String>,
    key: &str,
) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::malformed(path, format!("missing key {key}")))?;
    raw.parse()
        .map_err(|_| Error::malformed(path, format!("bad value for {key}: {raw:?}")))
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticScene> {
    let meta_path = dir.join("meta.txt");
    let text = String::from_utf8(read_file(&meta_path)?)
        .map_err(|_| Error::malformed(&meta_path, "not UTF-8"))?;
    let meta = parse_key_values(&meta_path, &text)?;
    let n: usize = meta_field(&meta_path, &meta, "N")?;
    let w: usize = meta_field(&meta_path, &meta, "W")?;
    let h: usize = meta_field(&meta_path, &meta, "H")?;
    let classes: usize = meta_field(&meta_path, &meta, "L")?;
    let seed: u64 = meta_field(&meta_path, &meta, "seed")?;
    let recipe = meta.get("recipe").cloned().unwrap_or_default();
    let near: f64 = meta
        .get("near")
        .map_or(Ok(2.0), |_| meta_field(&meta_path, &meta, "near"))?;
    let far: f64 = meta
        .get("far")
        .map_or(Ok(6.0), |_| meta_field(&meta_path, &meta, "far"))?;
    let fg_classes = match meta.get("fg").map(String::as_str) {
        None | Some("") => Vec::new(),
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<u8>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::malformed(&meta_path, format!("bad fg list {list:?}")))?,
    };

    let poses_path = dir.join("poses.txt");
    let text = String::from_utf8(read_file(&poses_path)?)
        .map_err(|_| Error::malformed(&poses_path, "not UTF-8"))?;
    let poses = parse_poses(&poses_path, &text)?;
    if poses.len() != n {
        return Err(Error::malformed(
            &poses_path,
            format!("{} poses for N={n}", poses.len()),
        ));
    }

    let mut scene = SyntheticScene {
        recipe,
        seed,
        n,
        width: w,
        height: h,
        classes,
        fg_classes,
        near,
        far,
        poses,
        frames: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        flow_fwd: Vec::with_capacity(n),
        flow_bwd: Vec::with_capacity(n),
        foreground: Vec::new(),
    };
    let check_dims = |path: &Path, fw: usize, fh: usize| -> Result<()> {
        if (fw, fh) != (w, h) {
            return Err(Error::malformed(
                path,
                format!("{fw}x{fh} does not match meta {w}x{h}"),
            ));
        }
        Ok(())
    };
    for f in 0..n {
        let id = f + 1;
        let path = dir.join(format!("frames/frame_{id:03}.png"));
        let img = read_png(&path)?.into_rgb8();
        check_dims(&path, img.width() as usize, img.height() as usize)?;
        scene.frames.push(
            img.into_raw()
                .into_iter()
                .map(|b| f32::from(b) / 255.0)
                .collect(),
        );

        let path = dir.join(format!("labels/label_{id:03}.png"));
        let img = read_png(&path)?.into_luma8();
        check_dims(&path, img.width() as usize, img.height() as usize)?;
        let labels = img.into_raw();
        if let Some(bad) = labels.iter().find(|&&c| usize::from(c) >= classes) {
            return Err(Error::malformed(
                &path,
                format!("class {bad} >= L={classes}"),
            ));
        }
        scene.labels.push(labels);

        for (name, store) in [("fwd", &mut scene.flow_fwd), ("bwd", &mut scene.flow_bwd)] {
            let path = dir.join(format!("flow/{name}_{id:03}.bin"));
            let (fw, fh, v) = read_flow_file(&path)?;
            check_dims(&path, fw, fh)?;
            store.push(v);
        }
        let path = dir.join(format!("depth/depth_{id:03}.bin"));
        let (fw, fh, v) = read_depth_file(&path)?;
        check_dims(&path, fw, fh)?;
        scene.depth.push(v);
    }
    scene.refresh_foreground();
    Ok(scene)
}

/// One pose per non-empty line: 9 rotation values, 3 translation, fx fy cx cy.
pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<CameraPose<f64>>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::malformed(path, format!("line {}: non-numeric value", i + 1)))?;
        if vals.len() != 16 {
            return Err(Error::malformed(
                path,
                format!("line {}: {} values, expected 16", i + 1, vals.len()),
            ));
        }
        let r = [
            [vals[0], vals[1], vals[2]],
            [vals[3], vals[4], vals[5]],
            [vals[6], vals[7], vals[8]],
        ];
        let pose = CameraPose::new(
            r,
            [vals[9], vals[10], vals[11]],
            vals[12],
            vals[13],
            vals[14],
            vals[15],
        )
        .map_err(|e| Error::malformed(path, format!("line {}: {e}", i + 1)))?;
        poses.push(pose);
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_synth::{generate_scene, SceneRecipe};

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(&SceneRecipe::named("balloon").unwrap(), 2).unwrap();
        write_dataset(&s, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert!(back.bit_identical(&s));
    }

    #[test]
    fn truncated_flow_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(&SceneRecipe::named("balloon").unwrap(), 2).unwrap();
        write_dataset(&s, dir.path()).unwrap();
        let victim = dir.path().join("flow/fwd_004.bin");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 7]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Malformed { .. }));
        assert!(err.to_string().contains("fwd_004.bin"), "{err}");
    }

    #[test]
    fn hand_written_flow_bytes_decode() {
        let mut bytes = b"SFLO".to_vec();
        bytes.extend_from_slice(&[2, 0, 0, 0, 2, 0, 0, 0]);
        // 1.0, -2.0, 0.5, 0.25, 0, 0, -1.5, 3.0
        for word in [
            [0x00, 0x00, 0x80, 0x3f],
            [0x00, 0x00, 0x00, 0xc0],
            [0x00, 0x00, 0x00, 0x3f],
            [0x00, 0x00, 0x80, 0x3e],
            [0x00, 0x00, 0x00, 0x00],
            [0x00, 0x00, 0x00, 0x00],
            [0x00, 0x00, 0xc0, 0xbf],
            [0x00, 0x00, 0x40, 0x40],
        ] {
            bytes.extend_from_slice(&word);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        fs::write(&path, &bytes).unwrap();
        let (w, h, v) = read_flow_file(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(v, vec![1.0, -2.0, 0.5, 0.25, 0.0, 0.0, -1.5, 3.0]);
        write_flow_file(&path, 2, 2, &v).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn wrong_magic_and_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_depth_file(&path, 1, 1, &[2.0]).unwrap();
        assert!(read_flow_file(&path)
            .unwrap_err()
            .to_string()
            .contains("bad magic"));
        assert!(read_depth_file(&dir.path().join("missing.bin")).is_err());
    }
}
