use std::fs;

use bevseg::checkpoint;
use bevseg::config::RunConfig;
use bevseg::dataset::{
    decode_bev, encode_bev, format_intrinsics, load_dataset, parse_intrinsics, read_ppm, read_sample, write_ppm,
    write_sample,
};
use bevseg_core::bev::GridSpec;
use bevseg_core::geometry::CameraIntrinsics;
use bevseg_core::model::{init_model, ModelConfig};
use bevseg_core::rng;
use bevseg_core::synthworld::{generate_sample, SceneConfig};
use bevseg_core::tensor::Tensor;
use tempfile::TempDir;

#[test]
fn ppm_round_trip_quantizes_to_eight_bits() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("x.ppm");
    let img = Tensor::from_fn(&[3, 5, 7], |i| (i % 17) as f64 / 16.0);
    write_ppm(&path, &img).unwrap();
    let back = read_ppm(&path).unwrap();
    assert_eq!(back.shape(), img.shape());
    for (a, b) in img.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    // a second round trip is exact
    write_ppm(&path, &back).unwrap();
    assert_eq!(read_ppm(&path).unwrap(), back);
}

#[test]
fn intrinsics_text_round_trips() {
    let k = CameraIntrinsics::new(101.5, 99.25, 63.5, 47.0, 128, 96).unwrap();
    let text = format_intrinsics(&k);
    assert_eq!(parse_intrinsics(&text, "k.txt".as_ref()).unwrap(), k);
    assert!(parse_intrinsics("1 2 3\n", "k.txt".as_ref()).is_err());
    assert!(parse_intrinsics("100 0 10 0 100 10 0 0 2\n20 20\n", "k.txt".as_ref()).is_err());
}

#[test]
fn bev_file_checks_the_grid() {
    let sample = generate_sample(&SceneConfig::default(), 4, 0, true).unwrap();
    let gt = sample.gt_bev.unwrap();
    let bytes = encode_bev(&gt);
    let grid = GridSpec::default();
    assert_eq!(decode_bev(&bytes, &grid, "b".as_ref()).unwrap(), gt);
    let other = GridSpec { cell_size: 0.5, ..grid };
    assert!(decode_bev(&bytes, &other, "b".as_ref()).is_err());
    assert!(decode_bev(&bytes[..bytes.len() - 1], &grid, "b".as_ref()).is_err());
}

#[test]
fn sample_directory_round_trip() {
    let dir = TempDir::new().unwrap();
    let scene = SceneConfig::default();
    let s = generate_sample(&scene, 8, 3, true).unwrap();
    write_sample(&dir.path().join(&s.id), &s).unwrap();
    let back = read_sample(&dir.path().join(&s.id), &s.id, &scene.grid, true).unwrap();
    assert_eq!(back.intrinsics, s.intrinsics);
    assert_eq!(back.gt_bev, s.gt_bev);
    assert_eq!(back.visibility, s.visibility);
    let unlabeled = read_sample(&dir.path().join(&s.id), &s.id, &scene.grid, false).unwrap();
    assert!(unlabeled.gt_bev.is_none());
}

#[test]
fn dataset_keeps_its_scene_settings() {
    let dir = TempDir::new().unwrap();
    let mut cfg = RunConfig::default();
    cfg.set("world.cars_max", "1").unwrap();
    cfg.set("grid.cell_size", "0.5").unwrap();
    bevseg::commands::gen_data(&cfg, 5, 0.4, 2, dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    assert_eq!(data.scene, cfg.scene);
    assert_eq!((data.labeled.len(), data.unlabeled.len()), (2, 3));

    fs::write(dir.path().join("scene.cfg"), "trainer.epochs = 3\n").unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn checkpoint_shapes_determine_the_model() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = ModelConfig {
        encoder_channels: vec![4, 8, 12],
        depth_bins: 10,
        decoder_channels: 6,
        ..ModelConfig::default()
    };
    let params = init_model(&model, &mut rng::stream(1, &[])).unwrap();
    checkpoint::save(&path, &params).unwrap();
    let loaded = checkpoint::load_inferred(&path, (model.image_height, model.image_width), model.grid).unwrap();
    assert_eq!(loaded.config, model);
    assert_eq!(loaded.tensors(), params.tensors());

    fs::write(&path, b"not a checkpoint").unwrap();
    assert!(checkpoint::load_inferred(&path, (96, 128), model.grid).is_err());
}
