use std::fs;

use mvs_core::dataio::{
    distribution_from_archive, distribution_to_archive, generate_scene, load_sequence, save_generated, volume_from_archive,
    volume_to_archive, SceneSpec,
};
use mvs_core::archive::Archive;
use mvs_core::geometry::{bilinear_sample, project, CameraView};
use mvs_core::network::{Architecture, DisparityNet, NetworkConfig};
use mvs_core::sweep::{build_volume, make_disparity_grid};
use mvs_core::Error;
use nalgebra::Vector3;

#[test]
fn generated_sequence_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SceneSpec::toy(40, 30, 4, 3)).unwrap();
    let manifest = save_generated(dir.path(), &scene).unwrap();
    let seq = load_sequence(&manifest).unwrap();
    assert_eq!(seq.views.len(), 4);
    for (a, b) in scene.views.iter().zip(&seq.views) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image.data(), b.image.data());
        assert!((a.pose.rotation() - b.pose.rotation()).abs().max() <= 1e-12);
        assert!((a.pose.translation() - b.pose.translation()).abs().max() <= 1e-12);
        assert_eq!(a.intrinsics, b.intrinsics);
    }
    for (a, b) in scene.ground_truth.iter().zip(&seq.ground_truth) {
        let b = b.as_ref().unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.valid, b.valid);
    }
    assert_eq!(seq.points.unwrap(), scene.points);
}

fn write_one_frame(dir: &std::path::Path, rotation: &str, image: &str) -> std::path::PathBuf {
    let scene = generate_scene(&SceneSpec::toy(16, 12, 2, 1)).unwrap();
    save_generated(dir, &scene).unwrap();
    let text = format!(
        "version = 1\n\n[[frame]]\nid = 7\nimage = \"{image}\"\nintrinsics = [16.0, 16.0, 7.5, 5.5]\nrotation = {rotation}\ntranslation = [0.0, 0.0, 0.0]\n"
    );
    let path = dir.join("one.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn reflections_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write_one_frame(dir.path(), "[1, 0, 0, 0, 1, 0, 0, 0, 1]", "frame_0000.png");
    assert!(load_sequence(&ok).is_ok());
    let mirrored = write_one_frame(dir.path(), "[1, 0, 0, 0, 1, 0, 0, 0, -1]", "frame_0000.png");
    match load_sequence(&mirrored) {
        Err(Error::Load { frame, reason }) => {
            assert_eq!(frame, "7");
            assert!(reason.contains("pose"), "{reason}");
        }
        other => panic!("expected a load error, got {other:?}"),
    }
}

#[test]
fn missing_image_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_one_frame(dir.path(), "[1, 0, 0, 0, 1, 0, 0, 0, 1]", "nowhere.png");
    let err = load_sequence(&path).unwrap_err().to_string();
    assert!(err.contains("nowhere.png"), "{err}");
}

// Where a reference pixel is seen by the neighbor (the neighbor's own ground
// truth agrees with the reprojected depth), its color reappears there.
#[test]
fn ground_truth_is_photo_consistent_on_covisible_pixels() {
    let scene = generate_scene(&SceneSpec::toy(64, 48, 3, 8)).unwrap();
    let (reference, gt) = (&scene.views[0], &scene.ground_truth[0]);
    let kinv = reference.intrinsics.inverse_matrix();
    let mut checked = 0;
    for (view, ngt) in scene.views[1..].iter().zip(&scene.ground_truth[1..]) {
        let mut errors = Vec::new();
        for y in 0..48 {
            for x in 0..64 {
                let i = y * 64 + x;
                if !gt.valid[i] || gt.values[i] <= 0.0 {
                    continue;
                }
                let cam = kinv * Vector3::new(x as f64, y as f64, 1.0) / gt.values[i] as f64;
                let world = reference.pose.rotation().transpose() * (cam - reference.pose.translation());
                let Ok((q, depth)) = project(&world, view) else { continue };
                let (qx, qy) = (q.x.round(), q.y.round());
                if qx < 1.0 || qy < 1.0 || qx > 62.0 || qy > 46.0 {
                    continue;
                }
                let j = qy as usize * 64 + qx as usize;
                if !ngt.valid[j] || ((1.0 / ngt.values[j] as f64) - depth).abs() > 0.01 * depth {
                    continue;
                }
                let (color, inside) = bilinear_sample(&view.image, q);
                if !inside {
                    continue;
                }
                let e: f32 = (0..3).map(|c| (color[c] - reference.image.data()[i * 3 + c]).abs()).sum::<f32>() / 3.0;
                errors.push(e);
            }
        }
        assert!(errors.len() > 64 * 48 / 2, "only {} co-visible pixels", errors.len());
        errors.sort_by(f32::total_cmp);
        let median = errors[errors.len() / 2];
        let mean = errors.iter().sum::<f32>() / errors.len() as f32;
        assert!(median < 2.0 / 255.0 && mean < 2.0 / 255.0, "color difference median {median}, mean {mean}");
        checked += errors.len();
    }
    assert!(checked > 0);
}

#[test]
fn archives_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&SceneSpec::toy(24, 16, 3, 2)).unwrap();
    let nbrs: Vec<&CameraView> = scene.views[1..].iter().collect();
    let volume = build_volume(&scene.views[0], &nbrs, &make_disparity_grid(0.4, 5).unwrap(), 1 << 30).unwrap();
    let path = dir.path().join("v.mvsarc");
    volume_to_archive(&volume).save(&path).unwrap();
    let back = volume_from_archive(&Archive::load(&path).unwrap(), &path).unwrap();
    assert_eq!(back, volume);

    let net = DisparityNet::<f32>::new_random(NetworkConfig { disparity_levels: 5, ..NetworkConfig::toy() }, Architecture::Full, 1)
        .unwrap();
    let dist = net.forward(&volume, &scene.views[0].image).unwrap();
    let path = dir.path().join("d.mvsarc");
    distribution_to_archive(&dist).save(&path).unwrap();
    let back = distribution_from_archive(&Archive::load(&path).unwrap(), &path).unwrap();
    assert_eq!(back.probs, dist.probs);
    assert_eq!(back.grid, dist.grid);

    // A volume archive is not a distribution.
    let path = dir.path().join("v.mvsarc");
    assert!(distribution_from_archive(&Archive::load(&path).unwrap(), &path).is_err());
}
