use dtmars_core::bbox::iou;
use dtmars_core::raster::transform_sprite;
use dtmars_core::sprites::{procedural_asset, procedural_background, CropAsset, GrowthStage, Species};
use dtmars_core::synth::{compose_scene, compose_scene_detailed, BackgroundSource, SynthConfig};
use dtmars_core::IMAGE_SIZE;
use proptest::prelude::*;

fn assets() -> Vec<CropAsset> {
    let mut out = Vec::new();
    for species in [Species::SugarBeet, Species::Cirsium] {
        for stage in GrowthStage::ALL {
            out.push(procedural_asset(species, stage, 0, 3));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn recorded_boxes_are_transformed_extents(seed in any::<u64>(), hi in 1usize..6, rot in 0.0..360.0f64) {
        let a = assets();
        let bg = procedural_background(256, 256, 1, 2);
        let cfg = SynthConfig { objects_per_image: (1, hi), rotation: (0.0, rot), ..SynthConfig::default() };
        let (img, placed) = compose_scene_detailed(&bg, &a, &cfg, seed).unwrap();
        prop_assert!((1..=hi).contains(&img.boxes.len()));
        for (b, p) in img.boxes.iter().zip(&placed) {
            let again = transform_sprite(&a[p.asset_index].image, p.angle_deg, p.scale).unwrap().tight().unwrap();
            prop_assert_eq!(&again, &p.sprite);
            let (w, h) = (p.sprite.width, p.sprite.height);
            prop_assert_eq!(p.sprite.opaque_extent(), Some((0, 0, w - 1, h - 1)));
            let (x0, y0, x1, y1) = b.corners_px(IMAGE_SIZE, IMAGE_SIZE);
            prop_assert!((x0 - p.x).abs() < 1e-9 && (y0 - p.y).abs() < 1e-9);
            prop_assert!((x1 - p.x - w as f64).abs() < 1e-9 && (y1 - p.y - h as f64).abs() < 1e-9);
            prop_assert!(x0 >= -1e-9 && y0 >= -1e-9 && x1 <= IMAGE_SIZE as f64 + 1e-9 && y1 <= IMAGE_SIZE as f64 + 1e-9);
        }
        for i in 0..img.boxes.len() {
            for j in i + 1..img.boxes.len() {
                prop_assert!(iou(&img.boxes[i], &img.boxes[j]) <= cfg.overlap_max_iou + 1e-12);
            }
        }
    }

    #[test]
    fn scenes_depend_only_on_inputs(seed in any::<u64>()) {
        let a = assets();
        let bg = procedural_background(240, 240, 0, 5);
        let cfg = SynthConfig::default();
        prop_assert_eq!(compose_scene(&bg, &a, &cfg, seed).unwrap(), compose_scene(&bg, &a, &cfg, seed).unwrap());
    }
}

#[test]
fn ablation_settings_are_expressible() {
    let single = SynthConfig { objects_per_image: (1, 1), backgrounds: BackgroundSource::Procedural { count: 1 }, ..Default::default() };
    let multi = SynthConfig { objects_per_image: (2, 6), backgrounds: BackgroundSource::Procedural { count: 24 }, ..Default::default() };
    for cfg in [single.clone(), multi.clone(), SynthConfig { objects_per_image: (2, 6), ..single }, SynthConfig { objects_per_image: (1, 1), ..multi }] {
        cfg.validate().unwrap();
    }
}
