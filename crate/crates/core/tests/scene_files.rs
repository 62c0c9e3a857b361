//! The on-disk formats written by the scene generator read back into the
//! same values, and a model survives a write/read cycle unchanged.

use std::collections::BTreeMap;

use itc_inventory::classify::{read_model, train_centroid, train_svm, write_model, Classifier, SvmParams, TrainedModel};
use itc_inventory::config::PipelineConfig;
use itc_inventory::evaluate::read_plots;
use itc_inventory::geodata::{read_ascii_grid, read_envi_cube, read_ground_truth, read_point_cloud};
use itc_inventory::spectral::{read_band_selection, write_band_selection, BandSelection, LabeledPixels};
use itc_inventory::synth::{generate_scene, write_scene};

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.synth.width = 60.0;
    cfg.synth.height = 60.0;
    cfg.synth.n_trees = 20;
    cfg.synth.n_plots = 2;
    cfg.synth.n_bands = 30;
    cfg.synth.species.truncate(3);
    cfg
}

#[test]
fn scene_files_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let scene = generate_scene(&cfg).unwrap();
    let config_path = write_scene(&scene, &cfg, dir.path()).unwrap();
    let loaded = PipelineConfig::load(&config_path).unwrap();
    let inputs = loaded.resolve_inputs().unwrap();

    let dtm = read_ascii_grid(&inputs.dtm).unwrap();
    assert_eq!(dtm.geometry, scene.dtm.geometry);
    for (a, b) in dtm.values().iter().zip(scene.dtm.values()) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }

    let cloud = read_point_cloud(&inputs.points).unwrap();
    assert_eq!(cloud.len(), scene.cloud.len());

    let cube = read_envi_cube(&inputs.cube_header, &inputs.cube_data).unwrap();
    assert_eq!(cube.nbands, scene.cube.nbands);
    assert_eq!(cube.geometry, scene.cube.geometry);
    let worst = cube.samples().iter().zip(scene.cube.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "cube differs by {worst}");

    assert_eq!(read_ground_truth(&inputs.ground_truth).unwrap().len(), scene.ground_truth.len());
    let plots = read_plots(inputs.plots.as_ref().unwrap(), 15.0, 7.5).unwrap();
    assert_eq!(plots.len(), 2);
    assert_eq!(plots, scene.plots);
}

#[test]
fn models_and_band_selections_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let scene = generate_scene(&cfg).unwrap();

    // Pixels straight from the generator's signatures, one species per tree.
    let mut px = LabeledPixels::default();
    let cube = &scene.cube;
    let mut per_species: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &scene.trees {
        if let Some((r, c)) = cube.geometry.cell_of(t.tree.x, t.tree.y) {
            let p = cube.geometry.index(r, c);
            px.push(t.tree.species.clone(), cube.pixel(p));
            *per_species.entry(t.tree.species.as_str()).or_default() += 1;
        }
    }
    assert!(per_species.len() >= 2);

    let bands: Vec<usize> = (0..cube.nbands).collect();
    let models = [
        TrainedModel { bands: bands.clone(), classifier: Classifier::Centroid(train_centroid(&px).unwrap()) },
        TrainedModel { bands, classifier: Classifier::Svm(train_svm(&px, &SvmParams::default()).unwrap().model) },
    ];
    for (i, model) in models.iter().enumerate() {
        let path = dir.path().join(format!("model{i}.txt"));
        write_model(model, &path).unwrap();
        let back = read_model(&path).unwrap();
        for f in &px.features {
            assert_eq!(back.predict_spectrum(f), model.predict_spectrum(f));
        }
    }

    let sel = BandSelection { indices: vec![2, 5, 11], criterion_value: 1.875 };
    let path = dir.path().join("bands.csv");
    write_band_selection(&sel, &path).unwrap();
    assert_eq!(read_band_selection(&path).unwrap(), sel);
}
