//! Generates a small self-contained workspace: a toy embedding model, images
//! with a bright object, a localization set, a cross-view orientation set
//! and a prebuilt index.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};
use metric_lens::evaluate::{pixel_to_angle, AerialConvention, AngleDeg, Projection};
use metric_lens::format::write_tensor;
use metric_lens::nn::{Layer, Model};
use metric_lens::retrieval::build_index;
use metric_lens::synth::{random_model, HeadKind};
use metric_lens::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{write_jsonl, LocalizationRecord, OrientationRecord};
use crate::workspace::{image_files, WorkspaceConfig};

pub const IMAGE_SHAPE: [usize; 3] = [16, 16, 3];
pub const STREET_SHAPE: [usize; 3] = [4, 72, 4];
pub const AERIAL_SHAPE: [usize; 3] = [21, 21, 4];
const IMAGES: usize = 12;
const ROTATIONS: usize = 16;

pub struct DemoLayout {
    pub root: PathBuf,
    pub workspace: PathBuf,
    pub model: PathBuf,
    pub street_model: PathBuf,
    pub aerial_model: PathBuf,
    pub localization: PathBuf,
    pub orientation: PathBuf,
    pub index_dir: PathBuf,
}

/// `conv1x1(identity) -> relu -> gap`: features are the rectified image.
fn identity_gap_model(name: &str, shape: [usize; 3]) -> Model {
    let c = shape[2];
    let mut w = vec![0.0; c * c];
    for k in 0..c {
        w[k * c + k] = 1.0;
    }
    let layers = vec![
        Layer::Conv2d {
            weight: Tensor::new(vec![1, 1, c, c], w).expect("identity kernel"),
            bias: Tensor::zeros(vec![c]).expect("non-empty"),
            stride: 1,
            padding: 0,
        },
        Layer::Relu,
        Layer::GlobalAvgPool,
    ];
    Model::new(name, shape, layers, 1).expect("identity model is valid")
}

fn object_image(rng: &mut ChaCha8Rng) -> (Tensor, [usize; 4]) {
    let [h, w, c] = IMAGE_SHAPE;
    let (bh, bw) = (rng.gen_range(4..9), rng.gen_range(4..9));
    let (y0, x0) = (rng.gen_range(0..=h - bh), rng.gen_range(0..=w - bw));
    let mut data: Vec<f32> = (0..h * w * c).map(|_| rng.gen_range(0.0..0.5)).collect();
    for y in y0..y0 + bh {
        for x in x0..x0 + bw {
            for k in 0..c {
                data[(y * w + x) * c + k] += 1.5;
            }
        }
    }
    (
        Tensor::new(IMAGE_SHAPE.to_vec(), data).expect("valid image"),
        [x0, y0, x0 + bw, y0 + bh],
    )
}

/// A landmark on channel 0 seen from above and from the street; the other
/// channels carry faint clutter.
fn cross_view_pair(rng: &mut ChaCha8Rng, rotation: f64) -> (Tensor, Tensor) {
    let [sh, sw, c] = STREET_SHAPE;
    let [ah, aw, _] = AERIAL_SHAPE;
    let (ar, ac) = loop {
        let (r, col) = (rng.gen_range(0..ah), rng.gen_range(0..aw));
        if 2 * r + 1 != ah || 2 * col + 1 != aw {
            break (r, col);
        }
    };
    let aerial_angle = pixel_to_angle(
        ar,
        ac,
        Projection::Aerial {
            height: ah,
            width: aw,
            convention: AerialConvention::default(),
        },
    )
    .expect("not the center pixel");
    let street_angle = AngleDeg::new(aerial_angle.value() - rotation);
    let col = (street_angle.value() * sw as f64 / 360.0).round() as usize % sw;
    let mut clutter = |len: usize| -> Vec<f32> {
        (0..len)
            .map(|i| {
                if i % c == 0 {
                    0.0
                } else {
                    rng.gen_range(0.0..0.01)
                }
            })
            .collect()
    };
    let mut street = clutter(sh * sw * c);
    for r in 0..sh {
        street[(r * sw + col) * c] = 1.0;
    }
    let mut aerial = clutter(ah * aw * c);
    aerial[(ar * aw + ac) * c] = 1.0;
    (
        Tensor::new(STREET_SHAPE.to_vec(), street).expect("valid street image"),
        Tensor::new(AERIAL_SHAPE.to_vec(), aerial).expect("valid aerial image"),
    )
}

pub fn write_demo(root: &Path, seed: u64) -> Result<DemoLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images_dir = root.join("images");
    let orient_dir = root.join("orient");
    fs::create_dir_all(&images_dir)?;
    fs::create_dir_all(&orient_dir)?;

    let model = random_model(&mut rng, IMAGE_SHAPE, 6, HeadKind::GapFc, 8, false);
    let model_path = model.save(root, "model")?;

    let mut boxes = Vec::new();
    for i in 0..IMAGES {
        let (img, gt) = object_image(&mut rng);
        write_tensor(&img, images_dir.join(format!("img{i:02}.tnsr")))?;
        boxes.push(gt);
    }
    let localization: Vec<LocalizationRecord> = (0..IMAGES)
        .map(|i| LocalizationRecord {
            query: format!("images/img{i:02}.tnsr").into(),
            reference: format!("images/img{:02}.tnsr", (i + 1) % IMAGES).into(),
            gt_box: boxes[i],
        })
        .collect();
    let localization_path = root.join("localization.jsonl");
    write_jsonl(&localization_path, &localization)?;

    let street_path = identity_gap_model("street", STREET_SHAPE).save(root, "street")?;
    let aerial_path = identity_gap_model("aerial", AERIAL_SHAPE).save(root, "aerial")?;
    let mut orientation = Vec::new();
    for i in 0..ROTATIONS {
        let rotation = rng.gen_range(0.0..360.0);
        let (street, aerial) = cross_view_pair(&mut rng, rotation);
        write_tensor(&street, orient_dir.join(format!("street{i:02}.tnsr")))?;
        write_tensor(&aerial, orient_dir.join(format!("aerial{i:02}.tnsr")))?;
        orientation.push(OrientationRecord {
            query: format!("orient/street{i:02}.tnsr").into(),
            reference: format!("orient/aerial{i:02}.tnsr").into(),
            gt_rotation_deg: rotation,
        });
    }
    let orientation_path = root.join("orientation.jsonl");
    write_jsonl(&orientation_path, &orientation)?;

    let index_dir = root.join("index");
    let (index, failures) = build_index(&model, &image_files(&images_dir)?);
    ensure!(
        failures.is_empty(),
        "demo images failed to embed: {failures:?}"
    );
    index.save(&index_dir)?;

    let config = WorkspaceConfig {
        model: "model.json".into(),
        ref_model: None,
        image_dir: "images".into(),
        index_dir: Some("index".into()),
    };
    let workspace = root.join("workspace.json");
    fs::write(&workspace, serde_json::to_vec_pretty(&config)?)?;

    Ok(DemoLayout {
        root: root.to_path_buf(),
        workspace,
        model: model_path,
        street_model: street_path,
        aerial_model: aerial_path,
        localization: localization_path,
        orientation: orientation_path,
        index_dir,
    })
}
