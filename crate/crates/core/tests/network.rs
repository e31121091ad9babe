use mvs_core::dataio::{generate_scene, SceneSpec};
use mvs_core::geometry::CameraView;
use mvs_core::network::{tile_predict, Architecture, DisparityNet, NetworkConfig};
use mvs_core::sweep::{build_volume, make_disparity_grid};

#[test]
fn tiled_prediction_is_deterministic_and_normalized() {
    let scene = generate_scene(&SceneSpec::toy(80, 56, 3, 4)).unwrap();
    let nbrs: Vec<&CameraView> = scene.views[1..].iter().collect();
    let volume = build_volume(&scene.views[0], &nbrs, &make_disparity_grid(0.5, 8).unwrap(), 1 << 30).unwrap();
    let net = DisparityNet::<f32>::new_random(NetworkConfig::toy(), Architecture::Full, 2).unwrap();
    let a = tile_predict(&net, &volume, &scene.views[0].image, 32, 16).unwrap();
    let b = tile_predict(&net, &volume, &scene.views[0].image, 32, 16).unwrap();
    assert_eq!((a.width, a.height), (80, 56));
    assert_eq!(
        a.probs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.probs.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!(a.normalization_error() <= 1e-5);
}

#[test]
fn one_tile_covering_the_image_matches_the_direct_pass() {
    let scene = generate_scene(&SceneSpec::toy(32, 32, 3, 5)).unwrap();
    let nbrs: Vec<&CameraView> = scene.views[1..].iter().collect();
    let volume = build_volume(&scene.views[0], &nbrs, &make_disparity_grid(0.5, 8).unwrap(), 1 << 30).unwrap();
    let net = DisparityNet::<f32>::new_random(NetworkConfig::toy(), Architecture::Full, 3).unwrap();
    let direct = net.forward(&volume, &scene.views[0].image).unwrap();
    let tiled = tile_predict(&net, &volume, &scene.views[0].image, 32, 32).unwrap();
    let diff = direct.probs.iter().zip(&tiled.probs).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(diff <= 1e-6, "{diff}");
}
