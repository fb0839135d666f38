use c2g_core::eval::{make_trial, TrialConfig};
use c2g_core::synthetic::{
    desk_cameras, desk_workspace, preset_spec, render_scene, trace_view, Codebook, Label, Preset, RenderOptions,
    Variation,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn back_projected_depth_lies_on_the_surface() {
    for preset in [Preset::Toy, Preset::Shoe] {
        let spec = preset_spec(preset, &Variation::none(), &mut ChaCha8Rng::seed_from_u64(0)).with_table();
        let (scene, _) = render_scene(
            &spec,
            &desk_cameras(),
            desk_workspace(),
            0.01,
            &Codebook::default(),
            &RenderOptions::default(),
        )
        .unwrap();
        for view in &scene.views {
            let d = &view.depth;
            let mut hits = 0;
            for row in 0..d.height {
                for col in 0..d.width {
                    let z = d.at(col, row);
                    if z <= 0.0 {
                        continue;
                    }
                    hits += 1;
                    let p = view.camera.backproject(col as f64, row as f64, z as f64).unwrap();
                    assert!(
                        spec.sdf(&p).abs() < 1e-3,
                        "{} ({col},{row}): sdf {}",
                        view.name,
                        spec.sdf(&p)
                    );
                }
            }
            assert!(hits > d.width * d.height / 4, "{} sees too little", view.name);
        }
    }
}

#[test]
fn pixel_labels_agree_with_voxel_labels() {
    let spec = preset_spec(Preset::Toy, &Variation::none(), &mut ChaCha8Rng::seed_from_u64(0)).with_table();
    let (scene, truth) = render_scene(
        &spec,
        &desk_cameras(),
        desk_workspace(),
        0.01,
        &Codebook::default(),
        &RenderOptions::default(),
    )
    .unwrap();
    let (mut agree, mut labelled) = (0, 0);
    for (view, (name, w, _, labels)) in scene.views.iter().zip(&truth.view_labels) {
        assert_eq!(&view.name, name);
        for (i, &id) in labels.iter().enumerate() {
            let Some(label) = Label::from_id(id).filter(|l| l.part != 0) else {
                continue;
            };
            let (col, row) = (i % w, i / w);
            let z = view.depth.at(col, row) as f64;
            let p = view.camera.backproject(col as f64, row as f64, z).unwrap();
            if let Some(v) = truth.label_at(&p) {
                labelled += 1;
                agree += usize::from(v == label);
            }
        }
    }
    assert!(labelled > 1000);
    assert!(agree * 100 >= 98 * labelled, "{agree}/{labelled}");
}

#[test]
fn both_instances_visible_in_every_trial_source() {
    let cfg = TrialConfig::default();
    for index in 0..6 {
        let trial = make_trial(Preset::Toy, &cfg, 3, index).unwrap();
        let opposite = Label {
            side: trial.target.side.opposite(),
            ..trial.target
        };
        for label in [trial.target, opposite] {
            assert!(
                trial.source_labels.contains(&label.id()),
                "trial {index}: {label:?} hidden"
            );
        }
        let w = trial.source.image.width;
        let (u, v) = trial.click;
        assert_eq!(trial.source_labels[v as usize * w + u as usize], trial.target.id());
    }
}

#[test]
fn trials_are_reproducible() {
    let cfg = TrialConfig::default();
    let a = make_trial(Preset::Shoe, &cfg, 9, 2).unwrap();
    let b = make_trial(Preset::Shoe, &cfg, 9, 2).unwrap();
    assert_eq!(a.scene, b.scene);
    assert_eq!(a.source, b.source);
    assert_eq!(a.truth, b.truth);
    let raw = trace_view(
        &preset_spec(Preset::Shoe, &Variation::none(), &mut ChaCha8Rng::seed_from_u64(1)),
        &desk_cameras()[0],
    );
    assert!(raw.labels.iter().any(|&l| l >= 0));
}
