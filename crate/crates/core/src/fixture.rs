//! Synthetic face images for tests, demos and the shipped fixture.
//!
//! Each identity is a fixed set of colours and proportions; each variant of
//! it jitters position, size and lighting slightly.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{BoundingBox, Image};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSpec {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub eyes: [f32; 3],
    pub mouth: [f32; 3],
    pub background: [f32; 3],
    pub eye_spacing: f32,
    pub eye_height: f32,
    pub mouth_width: f32,
    pub hair_line: f32,
}

fn color<R: Rng>(r: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [r.random_range(lo..hi), r.random_range(lo..hi), r.random_range(lo..hi)]
}

pub fn identity_spec(identity: u64) -> FaceSpec {
    let mut r = rng::stream(identity, "fixture-identity");
    FaceSpec {
        skin: color(&mut r, 0.35, 0.95),
        hair: color(&mut r, 0.0, 0.6),
        eyes: color(&mut r, 0.0, 1.0),
        mouth: color(&mut r, 0.2, 0.9),
        background: color(&mut r, 0.1, 0.9),
        eye_spacing: r.random_range(0.25..0.45),
        eye_height: r.random_range(-0.35..-0.1),
        mouth_width: r.random_range(0.2..0.5),
        hair_line: r.random_range(-0.75..-0.45),
    }
}

/// Renders variant `variant` of `spec` on a `size x size` canvas and returns
/// the image with its face box.
pub fn render_face(spec: &FaceSpec, variant: u64, size: usize) -> (Image, BoundingBox) {
    let mut r = rng::stream(variant, "fixture-variant");
    let s = size as f32;
    let cx = s * (0.5 + r.random_range(-0.04..0.04));
    let cy = s * (0.5 + r.random_range(-0.04..0.04));
    let rx = s * r.random_range(0.14..0.16);
    let ry = rx * 1.2;
    let light: f32 = r.random_range(0.9..1.1);
    let img = Image::from_fn(size, size, 3, |x, y, c| {
        let u = (x as f32 + 0.5 - cx) / rx;
        let v = (y as f32 + 0.5 - cy) / ry;
        let value = if u * u + v * v > 1.0 {
            spec.background[c]
        } else if v < spec.hair_line {
            spec.hair[c]
        } else {
            let eye = |ex: f32| {
                let du = (u - ex) / 0.12;
                let dv = (v - spec.eye_height) / 0.09;
                du * du + dv * dv <= 1.0
            };
            if eye(-spec.eye_spacing) || eye(spec.eye_spacing) {
                spec.eyes[c]
            } else if (v - 0.45).abs() < 0.07 && u.abs() < spec.mouth_width {
                spec.mouth[c]
            } else {
                spec.skin[c]
            }
        };
        (value * light).clamp(0.0, 1.0)
    });
    let bbox = BoundingBox {
        x_min: (cx - rx).floor() as i64,
        y_min: (cy - ry).floor() as i64,
        x_max: (cx + rx).ceil() as i64,
        y_max: (cy + ry).ceil() as i64,
    };
    (img, bbox)
}

/// One line of `bboxes.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image: String,
    pub bbox: [i64; 4],
    pub identity: String,
}

impl BoxRecord {
    pub fn bbox(&self) -> Result<BoundingBox> {
        let [a, b, c, d] = self.bbox;
        BoundingBox::new(a, b, c, d)
    }
}

pub const SIDECAR: &str = "bboxes.jsonl";

pub fn read_sidecar(dir: &Path) -> Result<Vec<BoxRecord>> {
    let path = dir.join(SIDECAR);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Writes `per_identity` images for each identity plus the sidecar file.
pub fn write_dataset(dir: &Path, identities: &[(u64, &str)], per_identity: usize, size: usize) -> Result<Vec<BoxRecord>> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for &(id, name) in identities {
        let spec = identity_spec(id);
        for k in 0..per_identity {
            let (img, bbox) = render_face(&spec, id * 1000 + k as u64, size);
            let file = format!("{name}_{k:02}.png");
            img.save_png(&dir.join(&file))?;
            records.push(BoxRecord {
                image: file,
                bbox: [bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max],
                identity: name.to_string(),
            });
        }
    }
    write_sidecar(dir, &records)?;
    Ok(records)
}

pub fn write_sidecar(dir: &Path, records: &[BoxRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(dir.join(SIDECAR), text)?;
    Ok(())
}
