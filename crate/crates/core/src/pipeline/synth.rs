//! Seeded bilateral "radiographs" with a planted knee joint per half.
//!
//! Each joint is a femur above and a tibia below a dark joint space. A latent
//! severity `grade + noise` narrows the space, thickens the bright
//! subchondral band and grows marginal spurs, so neighbouring grades overlap
//! the way real KL grades do. Illumination ramps, soft blobs, side markers
//! and pixel noise are added on top.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_labels, DatasetManifest, ManifestRecord};
use crate::detect::{annotation_box, write_annotations, AnnotationRecord, Side};
use crate::error::{arg, io_err, Result};
use crate::imaging::{quantize8, save_png, GrayImage};
use crate::GRADES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Images generated for each grade 0..=4.
    pub per_grade: [usize; GRADES],
    pub width: usize,
    pub height: usize,
    /// Joint-space height at severity 0, in pixels.
    pub gap_base: f64,
    /// Joint-space narrowing per severity unit.
    pub gap_slope: f64,
    pub gap_min: f64,
    /// Spread of the latent severity around the grade.
    pub severity_noise: f64,
    /// Subchondral brightening at severity 0.
    pub edge_base: f64,
    /// Added brightening per severity unit.
    pub edge_slope: f64,
    /// Spur length per severity unit above 1, in pixels.
    pub spur_slope: f64,
    /// Bone half-width range at the joint line.
    pub joint_half_width: [f64; 2],
    /// Amplitude of trabecular striations inside bone.
    pub texture: f64,
    /// Amplitude of illumination ramps and blobs.
    pub nuisance: f64,
    /// Standard deviation of pixel noise.
    pub noise: f64,
    /// Detection scale the annotation boxes are sized for.
    pub annotation_scale: f64,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_grade: [20; GRADES],
            width: 1000,
            height: 600,
            gap_base: 62.0,
            gap_slope: 11.0,
            gap_min: 6.0,
            severity_noise: 0.4,
            edge_base: 0.02,
            edge_slope: 0.035,
            spur_slope: 9.0,
            joint_half_width: [62.0, 100.0],
            texture: 0.06,
            nuisance: 0.3,
            noise: 0.04,
            annotation_scale: 0.1,
            id_prefix: "knee".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Generator settings of the coarse-severity source task used to
    /// pre-train the base network: a different anatomy and noise regime.
    pub fn source_task(per_grade: usize, seed: u64) -> Self {
        Self {
            per_grade: [per_grade; GRADES],
            gap_base: 70.0,
            gap_slope: 13.0,
            severity_noise: 0.6,
            edge_base: 0.0,
            edge_slope: 0.05,
            spur_slope: 6.0,
            joint_half_width: [70.0, 98.0],
            nuisance: 0.12,
            noise: 0.05,
            id_prefix: "source".into(),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_grade.iter().sum::<usize>() == 0 {
            return Err(arg("synthetic corpus needs at least one image"));
        }
        if self.width < 400 || self.height < 300 || !self.width.is_multiple_of(2) {
            return Err(arg(format!(
                "synthetic images must be at least 400x300 with even width, got {}x{}",
                self.width, self.height
            )));
        }
        let finite = [
            self.gap_base,
            self.gap_slope,
            self.gap_min,
            self.severity_noise,
            self.edge_base,
            self.edge_slope,
            self.spur_slope,
            self.texture,
            self.nuisance,
            self.noise,
        ];
        if finite.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(arg("generator parameters must be finite and non-negative"));
        }
        let [lo, hi] = self.joint_half_width;
        if !(lo > 0.0 && lo <= hi) {
            return Err(arg("joint half-width range must be positive and ordered"));
        }
        if !(self.annotation_scale > 0.0 && self.annotation_scale <= 1.0) {
            return Err(arg("annotation scale must lie in (0, 1]"));
        }
        if self.id_prefix.is_empty() || self.id_prefix.contains([',', '/', '\\', ' ']) {
            return Err(arg(format!("unusable id prefix {:?}", self.id_prefix)));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.per_grade.iter().sum()
    }

    /// Joint-space height at latent severity `s`.
    pub fn gap_at(&self, s: f64) -> f64 {
        (self.gap_base - self.gap_slope * s).max(self.gap_min)
    }

    /// Grade of each image, in id order.
    pub fn grade_sequence(&self) -> Vec<u8> {
        let mut grades: Vec<u8> = (0..GRADES as u8)
            .flat_map(|g| std::iter::repeat_n(g, self.per_grade[g as usize]))
            .collect();
        grades.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x05ee_d0f9_ade5));
        grades
    }
}

/// Maps KL grades onto the three-level severity of the source task.
pub fn coarse_grade(grade: u8) -> u8 {
    match grade {
        0 | 1 => 0,
        2 => 1,
        _ => 2,
    }
}

/// Planted structure of one joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthJoint {
    /// Joint center in pixel coordinates.
    pub center: (i64, i64),
    pub severity: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image_id: String,
    pub grade: u8,
    /// 8-bit quantized intensities, identical to what is written to disk.
    pub image: GrayImage,
    pub left: SynthJoint,
    pub right: SynthJoint,
    pub annotations: [AnnotationRecord; 2],
}

struct JointShape {
    cx: f64,
    cy: f64,
    gap: f64,
    tilt: f64,
    condyle: f64,
    shaft: f64,
    plateau: f64,
    bone: f64,
    rim: f64,
    sclerosis: f64,
    spur: f64,
    /// +1 when the fibula lies toward larger x.
    lateral: f64,
    tissue: f64,
    tissue_half: f64,
    /// Trabecular striation amplitude, wavenumber and phase.
    texture: (f64, f64, f64),
}

impl JointShape {
    fn femur_surface(&self, dx: f64) -> f64 {
        let u = (dx / self.condyle).clamp(-1.5, 1.5);
        let notch = 14.0 * (-(u / 0.18).powi(2)).exp();
        self.cy - self.gap / 2.0 + self.tilt * dx - 22.0 * u.powi(4) - notch
    }

    fn tibia_surface(&self, dx: f64) -> f64 {
        let u = (dx / self.plateau).clamp(-1.5, 1.5);
        self.cy + self.gap / 2.0 + self.tilt * dx + 8.0 * u * u
    }

    fn femur_half_width(&self, y: f64) -> f64 {
        let d = self.cy - y;
        if d < 50.0 {
            self.condyle
        } else {
            self.shaft + (self.condyle - self.shaft) * (-(d - 50.0) / 70.0).exp()
        }
    }

    fn tibia_half_width(&self, y: f64) -> f64 {
        let d = y - self.cy;
        let shaft = self.shaft * 0.95;
        if d < 40.0 {
            self.plateau
        } else {
            shaft + (self.plateau - shaft) * (-(d - 40.0) / 60.0).exp()
        }
    }

    /// Bone contribution at `(x, y)`, or `None` outside bone.
    fn bone_at(&self, x: f64, y: f64) -> Option<f64> {
        let dx = x - self.cx;
        let ax = dx.abs();
        let fs = self.femur_surface(dx);
        if y < fs {
            let hw = self.femur_half_width(y);
            if ax < hw {
                let edge = (hw - ax).min(fs - y);
                return Some(self.bone_value(x, y, edge, fs - y));
            }
        }
        let ts = self.tibia_surface(dx);
        if y > ts {
            let hw = self.tibia_half_width(y);
            if ax < hw {
                let edge = (hw - ax).min(y - ts);
                return Some(self.bone_value(x, y, edge, y - ts));
            }
        }
        // marginal spurs grow outward from the joint corners
        if self.spur > 0.5 {
            for (sx, sy) in [
                (self.condyle, self.femur_surface(self.condyle.copysign(dx))),
                (self.plateau, self.tibia_surface(self.plateau.copysign(dx))),
            ] {
                let ex = (ax - sx) / self.spur;
                let ey = (y - sy) / (0.45 * self.spur + 2.0);
                if ex > -0.3 && ex * ex + ey * ey < 1.0 {
                    return Some(self.bone + self.rim);
                }
            }
        }
        let fib_x = self.cx + self.lateral * (self.plateau + 6.0);
        if (x - fib_x).abs() < 11.0 && y > self.tibia_surface(self.plateau) + 15.0 {
            return Some(self.bone * 0.85);
        }
        None
    }

    fn bone_value(&self, x: f64, y: f64, edge_dist: f64, surface_dist: f64) -> f64 {
        let (amp, k, phase) = self.texture;
        let mut v = self.bone + amp * (k * y + phase + 0.8 * (x * 0.02).sin()).sin();
        if edge_dist < 8.0 {
            v += self.rim;
        }
        if surface_dist < 18.0 {
            v += self.sclerosis * (1.0 - surface_dist / 18.0);
        }
        v
    }
}

struct Blob {
    x: f64,
    y: f64,
    inv_two_sigma2: f64,
    amp: f64,
}

fn render(cfg: &SynthConfig, index: usize, grade: u8) -> Result<SynthImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (w, h) = (cfg.width, cfg.height);
    let half = w / 2;
    let grid = (1.0 / cfg.annotation_scale).round().max(1.0) as i64;
    let snap = |v: f64| ((v / grid as f64).round() as i64) * grid;
    let sev_noise = Normal::new(0.0, cfg.severity_noise.max(1e-12)).unwrap();

    let mut joints = Vec::with_capacity(2);
    let mut shapes = Vec::with_capacity(2);
    for (k, side) in Side::BOTH.into_iter().enumerate() {
        let off = (k * half) as f64;
        let cx = snap(off + half as f64 * rng.random_range(0.35..0.65));
        let cy = snap(h as f64 * rng.random_range(0.36..0.64));
        let severity = grade as f64 + sev_noise.sample(&mut rng);
        let gap = cfg.gap_at(severity);
        let condyle = rng.random_range(cfg.joint_half_width[0]..=cfg.joint_half_width[1]);
        let bone = rng.random_range(0.42..0.78);
        shapes.push(JointShape {
            cx: cx as f64,
            cy: cy as f64,
            gap,
            tilt: rng.random_range(-0.05..0.05),
            condyle,
            shaft: condyle * rng.random_range(0.55..0.65),
            plateau: condyle * rng.random_range(0.96..1.04),
            bone,
            rim: rng.random_range(0.08..0.14),
            sclerosis: cfg.edge_base + cfg.edge_slope * severity.max(0.0),
            spur: cfg.spur_slope * (severity - 1.0).max(0.0),
            lateral: if side == Side::Left { -1.0 } else { 1.0 },
            tissue: rng.random_range(0.18..0.34),
            tissue_half: condyle + rng.random_range(40.0..110.0),
            texture: (
                cfg.texture * rng.random_range(0.6..1.4),
                std::f64::consts::TAU / rng.random_range(25.0..60.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            ),
        });
        joints.push(SynthJoint {
            center: (cx, cy),
            severity,
            gap,
        });
    }

    let air = rng.random_range(0.04..0.1);
    let ramp = (
        rng.random_range(-cfg.nuisance..=cfg.nuisance),
        rng.random_range(-cfg.nuisance..=cfg.nuisance),
    );
    let blobs: Vec<Blob> = (0..6)
        .map(|_| {
            let sigma: f64 = rng.random_range(100.0..250.0);
            Blob {
                x: rng.random_range(0.0..w as f64),
                y: rng.random_range(0.0..h as f64),
                inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                amp: rng.random_range(-cfg.nuisance..=cfg.nuisance),
            }
        })
        .collect();
    // lead side marker, as stamped on real films
    let marker = rng.random_bool(0.5).then(|| {
        let mw = rng.random_range(40..70) as f64;
        let mh = rng.random_range(20..35) as f64;
        let mx = rng.random_range(0.0..w as f64 - mw);
        let my = if rng.random_bool(0.5) {
            rng.random_range(5.0..60.0)
        } else {
            h as f64 - mh - rng.random_range(5.0..60.0)
        };
        (mx, my, mw, mh, rng.random_range(0.85..0.95))
    });
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).unwrap();

    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = y as f64;
        for x in 0..w {
            let fx = x as f64;
            let j = &shapes[(x >= half) as usize];
            let mut v = match j.bone_at(fx, fy) {
                Some(b) => b,
                None if (fx - j.cx).abs() < j.tissue_half => j.tissue,
                None => air,
            };
            v += ramp.0 * (fx / w as f64 - 0.5) + ramp.1 * (fy / h as f64 - 0.5);
            for b in &blobs {
                let d2 = (fx - b.x).powi(2) + (fy - b.y).powi(2);
                v += b.amp * (-d2 * b.inv_two_sigma2).exp();
            }
            if let Some((mx, my, mw, mh, mv)) = marker {
                if fx >= mx && fx < mx + mw && fy >= my && fy < my + mh {
                    v = mv;
                }
            }
            if cfg.noise > 0.0 {
                v += noise.sample(&mut rng);
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let image = quantize8(&GrayImage::new(w, h, data)?);
    let image_id = format!("{}-{:05}", cfg.id_prefix, index);
    let annotations = [Side::Left, Side::Right].map(|side| {
        let (cx, cy) = joints[side as usize].center;
        AnnotationRecord {
            image_id: image_id.clone(),
            side,
            bbox: annotation_box(cx, cy, cfg.annotation_scale),
        }
    });
    Ok(SynthImage {
        image_id,
        grade,
        image,
        left: joints[0],
        right: joints[1],
        annotations,
    })
}

/// Lazily renders the corpus in id order.
pub fn synth_images(cfg: &SynthConfig) -> Result<impl Iterator<Item = Result<SynthImage>> + '_> {
    cfg.validate()?;
    let grades = cfg.grade_sequence();
    Ok(grades.into_iter().enumerate().map(move |(i, g)| render(cfg, i, g)))
}

/// Renders one image of the corpus.
pub fn synth_image(cfg: &SynthConfig, index: usize) -> Result<SynthImage> {
    cfg.validate()?;
    let grade = *cfg
        .grade_sequence()
        .get(index)
        .ok_or_else(|| arg(format!("index {index} beyond corpus of {}", cfg.total())))?;
    render(cfg, index, grade)
}

/// Writes `images/<id>.png`, `labels.csv` and `annotations.csv` under `out`.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<DatasetManifest> {
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut manifest = DatasetManifest::default();
    for s in synth_images(cfg)? {
        let s = s?;
        let path = images.join(format!("{}.png", s.image_id));
        save_png(&s.image, &path)?;
        let [left, right] = s.annotations;
        manifest.records.push(ManifestRecord {
            image_id: s.image_id,
            path,
            grade: s.grade,
            left: Some(left),
            right: Some(right),
        });
    }
    write_labels(&out.join("labels.csv"), &manifest, out)?;
    write_annotations(out.join("annotations.csv"), &manifest.annotations())?;
    Ok(manifest)
}
