use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use z2p_core::datagen::{make_dataset, DatagenConfig};
use z2p_core::image::RgbaImage;
use z2p_core::io::*;
use z2p_core::network::{SettingsMode, UNetConfig, Z2pModel};
use z2p_core::Error;

fn bundle(config: UNetConfig) -> ModelBundle {
    let model = Z2pModel::new(config, 42).unwrap();
    ModelBundle::from_model(
        &model,
        Provenance {
            train_seed: 7,
            steps: 123,
            final_loss: 0.125,
        },
    )
}

#[test]
fn bundle_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [SettingsMode::Adain, SettingsMode::FeatureAppend] {
        for encoding_enabled in [true, false] {
            let b = bundle(UNetConfig {
                settings_mode: mode,
                encoding_enabled,
                ..UNetConfig::toy()
            });
            let path = dir.path().join("m.z2pw");
            save_model(&b, &path).unwrap();
            let loaded = load_model(&path).unwrap();
            assert_eq!(loaded, b);
            assert_eq!(loaded.to_bytes(), b.to_bytes());
            let model = loaded.to_model().unwrap();
            assert_eq!(ModelBundle::from_model(&model, b.provenance), b);
            assert_eq!(model.encoding().is_some(), encoding_enabled);
        }
    }
}

#[test]
fn bundle_rejects_corruption() {
    let bytes = bundle(UNetConfig::toy()).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(ModelBundle::from_bytes(&bad), Err(Error::ModelFormat(m)) if m.contains("magic")));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(ModelBundle::from_bytes(&bad), Err(Error::ModelFormat(m)) if m.contains("version")));
    for cut in [0, 3, 7, 30, bytes.len() / 2, bytes.len() - 1] {
        assert!(ModelBundle::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(ModelBundle::from_bytes(&long).is_err());
}

#[test]
fn bundle_rejects_duplicate_names() {
    let mut b = bundle(UNetConfig::toy());
    let first = b.parameters[0].clone();
    b.parameters.push(first);
    let err = ModelBundle::from_bytes(&b.to_bytes()).unwrap_err();
    assert!(err.to_string().contains("duplicate parameter mapping.0.weight"), "{err}");
}

#[test]
fn mismatched_config_names_first_bad_parameter() {
    let mut b = bundle(UNetConfig::toy());
    b.config.base_channels = 4;
    let bytes = b.to_bytes();
    let loaded = ModelBundle::from_bytes(&bytes).unwrap();
    match loaded.to_model() {
        Err(Error::ParameterShape { name, expected, found }) => {
            assert_eq!(name, "enc0.conv0.weight");
            assert_eq!(expected, vec![4, 41, 3, 3]);
            assert_eq!(found, vec![8, 41, 3, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn png_round_trip_within_quantization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = (0..4 * 13 * 7).map(|_| rng.random::<f32>()).collect();
    let img = RgbaImage::from_planar(13, 7, data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    write_png_rgba(&img, &path).unwrap();
    let back = read_png_rgba(&path).unwrap();
    let worst = img
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
    assert_eq!(back, img.quantized());
    assert_eq!(encode_png(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn dataset_round_trip_is_bitwise() {
    let config = DatagenConfig {
        resolution: 16,
        points: 300,
        material: true,
        ..Default::default()
    };
    let samples = make_dataset(&config, 3, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &samples, &config, 11).unwrap();
    let (read_manifest, read) = read_dataset(dir.path()).unwrap();
    assert_eq!(read_manifest, manifest);
    assert_eq!(read_manifest.config, config);
    for (a, b) in samples.iter().zip(&read) {
        assert_eq!(a.training_sample(), *b);
    }
    let again = tempfile::tempdir().unwrap();
    for (i, s) in read.iter().enumerate() {
        write_sample(&again.path().join(sample_dir_name(i)), s).unwrap();
        for file in ["zbuffer.bin", "settings.txt", "target.png"] {
            let a = std::fs::read(dir.path().join(sample_dir_name(i)).join(file)).unwrap();
            let b = std::fs::read(again.path().join(sample_dir_name(i)).join(file)).unwrap();
            assert_eq!(a, b, "{file}");
        }
    }
}

#[test]
fn missing_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
}

const XYZ: &str = "0 0 0\n1 2 3 0.5\n-1.5 2e-3 4\n# c\n7 8 9\n";
const PLY: &str = "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255\n1 0 0 128\n0 1 0.5 0\n3 0 1 2\n";

fn mutate(rng: &mut ChaCha8Rng, base: &[u8]) -> Vec<u8> {
    let mut bytes = base.to_vec();
    for _ in 0..rng.random_range(1..6) {
        let len = bytes.len().max(1);
        match rng.random_range(0..6) {
            0 if !bytes.is_empty() => {
                let i = rng.random_range(0..bytes.len());
                bytes[i] = rng.random();
            }
            1 if !bytes.is_empty() => {
                let i = rng.random_range(0..bytes.len());
                bytes.remove(i);
            }
            2 => {
                let i = rng.random_range(0..=bytes.len());
                let pool = b" \n0123456789.-eE+nafly";
                bytes.insert(i, pool[rng.random_range(0..pool.len())]);
            }
            3 => bytes.truncate(rng.random_range(0..len)),
            4 => {
                let a = rng.random_range(0..len);
                let b = rng.random_range(0..len);
                let (a, b) = (a.min(b), a.max(b));
                let chunk = bytes.get(a..b).unwrap_or_default().to_vec();
                bytes.splice(a..a, chunk);
            }
            _ => {
                let i = rng.random_range(0..=bytes.len());
                let tokens: [&[u8]; 6] = [b"element vertex 99999999999\n", b"inf", b"\xff\xfe", b"end_header\n", b"property list", b"1e400"];
                bytes.splice(i..i, tokens[rng.random_range(0..tokens.len())].iter().copied());
            }
        }
    }
    bytes
}

#[test]
fn parsers_survive_fuzzing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut ok, mut err) = (0, 0);
    for i in 0..10_000 {
        let base = if i % 2 == 0 { XYZ.as_bytes() } else { PLY.as_bytes() };
        let input = mutate(&mut rng, base);
        match parse_point_cloud(&input) {
            Ok(cloud) => {
                assert!(cloud.len() > 0);
                assert!(cloud.points().iter().all(|p| p.iter().all(|c| c.is_finite())));
                ok += 1;
            }
            Err(e) => {
                assert!(matches!(e, Error::Parse { .. } | Error::EmptyCloud), "{e:?}");
                assert!(!e.to_string().is_empty());
                err += 1;
            }
        }
    }
    assert!(ok > 100 && err > 100, "ok {ok} err {err}");
}

#[test]
fn bundle_loader_survives_fuzzing() {
    let bytes = bundle(UNetConfig {
        base_channels: 2,
        style_dim: 8,
        ..UNetConfig::toy()
    })
    .to_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..2_000 {
        let mut b = bytes.clone();
        for _ in 0..rng.random_range(1..4) {
            let i = rng.random_range(0..b.len());
            b[i] = rng.random();
        }
        if rng.random_bool(0.3) {
            b.truncate(rng.random_range(0..b.len()));
        }
        if let Ok(loaded) = ModelBundle::from_bytes(&b) {
            let _ = loaded.to_model();
        }
    }
}
