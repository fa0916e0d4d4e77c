mod common;

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use ocunet::data::{
    augment, class_frequencies, decode_mask, default_batch_size, derive_class_weights,
    extract_patches, load_manifest, load_sample, make_batch, patch_grid, synth_dataset, to_patches,
    AugmentPolicy, AugmentationSpec, LabelMap, ManifestEntry, MaskEncoding, Sample, SampleManifest,
    Split, SynthSpec,
};
use ocunet::Tensor;
use proptest::prelude::*;

fn sample(h: usize, w: usize, seed: u64) -> Sample {
    let img: Vec<f32> = common::uniform(h * w * 3, 0.0, 1.0, seed)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let lab: Vec<u8> = common::labels(h * w, 3, seed + 1).into_iter().map(|l| l as u8).collect();
    Sample::new(
        Tensor::new(&[h, w, 3], img).unwrap(),
        LabelMap::new(h, w, lab).unwrap(),
    )
    .unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn slide_sized_image_tiles_into_an_eight_by_eight_grid() {
    assert_eq!(patch_grid((4500, 4500), (512, 512), (512, 512)).unwrap(), (8, 8));
    assert_eq!(patch_grid((640, 640), (640, 640), (640, 640)).unwrap(), (1, 1));
    assert!(patch_grid((100, 100), (128, 128), (128, 128)).is_err());
    assert!(patch_grid((100, 100), (10, 10), (0, 10)).is_err());
}

#[test]
fn patches_copy_the_right_pixels() {
    let s = sample(37, 41, 3);
    let patches = extract_patches(&s, (16, 8), (16, 8)).unwrap();
    let (rows, cols) = patch_grid((37, 41), (16, 8), (16, 8)).unwrap();
    assert_eq!(patches.len(), rows * cols);
    for (idx, p) in patches.iter().enumerate() {
        let (i0, j0) = (idx / cols * 16, idx % cols * 8);
        for i in 0..16 {
            for j in 0..8 {
                assert_eq!(p.labels.get(i, j), s.labels.get(i0 + i, j0 + j));
                for c in 0..3 {
                    assert_eq!(
                        p.image.data()[(i * 8 + j) * 3 + c],
                        s.image.data()[((i0 + i) * 41 + j0 + j) * 3 + c]
                    );
                }
            }
        }
    }
    // Smaller than the patch: resized instead of tiled.
    let small = to_patches(&sample(20, 24, 4), [32, 32]).unwrap();
    assert_eq!(small.len(), 1);
    assert_eq!((small[0].height(), small[0].width()), (32, 32));
}

#[test]
fn batch_size_defaults_by_resolution() {
    assert_eq!(default_batch_size(512, 512), 8);
    assert_eq!(default_batch_size(640, 640), 4);
    assert_eq!(default_batch_size(64, 64), 8);
}

#[test]
fn mask_codes_round_trip() {
    for enc in [MaskEncoding::Orca3, MaskEncoding::Binary] {
        for label in 0..enc.num_classes() as u8 {
            assert_eq!(enc.decode(enc.encode(label)), Some(label));
        }
    }
    // Lossy-compressed masks drift a little from the codes.
    assert_eq!(MaskEncoding::Orca3.decode(120), Some(1));
    assert_eq!(MaskEncoding::Orca3.decode(64), None);
    let labels = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
    let mask = labels.to_mask(MaskEncoding::Orca3);
    assert_eq!(mask.as_raw(), &[0, 128, 255, 255, 128, 0]);
    assert_eq!(decode_mask(&mask, MaskEncoding::Orca3, Path::new("m.png")).unwrap(), labels);
}

#[test]
fn bad_mask_value_names_the_file_and_pixel() {
    let mask = GrayImage::from_raw(2, 2, vec![0, 255, 70, 0]).unwrap();
    let err = decode_mask(&mask, MaskEncoding::Binary, Path::new("masks/bad.png")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("masks/bad.png") && msg.contains("(1, 0)"), "{msg}");
}

#[test]
fn synthetic_data_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let spec = SynthSpec::new(4, 32, 3, 11);
    synth_dataset(a.path(), &spec).unwrap();
    synth_dataset(b.path(), &spec).unwrap();
    synth_dataset(c.path(), &SynthSpec { seed: 12, ..spec }).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn synthetic_manifest_loads_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        test_fraction: 0.25,
        ..SynthSpec::new(8, 32, 1, 5)
    };
    let (written, path) = synth_dataset(dir.path(), &spec).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.entries, written.entries);
    assert_eq!(loaded.encoding, MaskEncoding::Binary);
    assert_eq!((loaded.count(Split::Train), loaded.count(Split::Test)), (6, 2));
    for e in &loaded.entries {
        let s = load_sample(&loaded, e).unwrap();
        assert_eq!((s.height(), s.width()), (32, 32));
        assert!(s.labels.data.iter().all(|&l| l < 2));
    }
    let freq = class_frequencies(&loaded).unwrap();
    assert!((freq.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn manifest_errors_name_the_offending_path() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, path) = synth_dataset(dir.path(), &SynthSpec::new(2, 16, 3, 0)).unwrap();

    m.entries.push(ManifestEntry {
        image_path: "images/missing.png".into(),
        mask_path: "masks/0000.png".into(),
        split: Split::Val,
    });
    m.save(&path).unwrap();
    let msg = load_manifest(&path).unwrap_err().to_string();
    assert!(msg.contains("missing.png"), "{msg}");

    // Same image in two splits.
    m.entries.pop();
    m.entries.push(ManifestEntry {
        split: Split::Test,
        ..m.entries[0].clone()
    });
    m.save(&path).unwrap();
    let msg = load_manifest(&path).unwrap_err().to_string();
    assert!(msg.contains("0000.png") && msg.contains("Test"), "{msg}");

    fs::write(&path, "encoding = \"sepia\"\npatch_size = [1, 1]\nentries = []\n").unwrap();
    let msg = load_manifest(&path).unwrap_err().to_string();
    assert!(msg.contains("manifest.toml"), "{msg}");

    let msg = load_manifest(&dir.path().join("nope.toml")).unwrap_err().to_string();
    assert!(msg.contains("nope.toml"), "{msg}");
}

#[test]
fn mismatched_mask_dimensions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = synth_dataset(dir.path(), &SynthSpec::new(1, 16, 1, 0)).unwrap();
    let mask = GrayImage::new(8, 16);
    mask.save(dir.path().join("masks/0000.png")).unwrap();
    let msg = load_sample(&m, &m.entries[0]).unwrap_err().to_string();
    assert!(msg.contains("0000.png") && msg.contains("8×16"), "{msg}");
}

#[test]
fn manifest_layout_is_documented_toml() {
    let mut m = SampleManifest::new(MaskEncoding::Orca3, [512, 512], "/data");
    m.entries.push(ManifestEntry {
        image_path: "a.png".into(),
        mask_path: "a_mask.png".into(),
        split: Split::Train,
    });
    let text = m.to_toml();
    assert!(text.contains("encoding = \"orca3\""), "{text}");
    assert!(text.contains("[[entries]]"), "{text}");
    let back: SampleManifest = toml::from_str(&text).unwrap();
    assert_eq!(back.entries, m.entries);
}

#[test]
fn class_weights_are_inverse_frequency_with_mean_one() {
    let w = derive_class_weights(&[0.75, 0.25]).unwrap();
    let v = w.values();
    assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 1.5).abs() < 1e-12);
    // An absent class is capped at the largest observed weight.
    let w = derive_class_weights(&[0.8, 0.2, 0.0]).unwrap();
    let v = w.values();
    assert_eq!(v[1], v[2]);
    assert!((v.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    assert!(derive_class_weights(&[0.0, 0.0]).is_err());
}

#[test]
fn batches_stack_one_hot_or_foreground_targets() {
    let s = [sample(4, 4, 1), sample(4, 4, 2)];
    let b = make_batch(&s, 3).unwrap();
    assert_eq!(b.images.shape(), &[2, 4, 4, 3]);
    assert_eq!(b.targets.shape(), &[2, 4, 4, 3]);
    for (px, &l) in b.targets.data().chunks(3).zip(&b.labels) {
        assert_eq!(px.iter().sum::<f32>(), 1.0);
        assert_eq!(px[l], 1.0);
    }
    let b = make_batch(&s, 1).unwrap();
    for (&t, &l) in b.targets.data().iter().zip(&b.labels) {
        assert_eq!(t, if l >= 1 { 1.0 } else { 0.0 });
    }
    assert!(make_batch(&s, 2).is_err());
    assert!(make_batch(&[], 3).is_err());
}

#[test]
fn disabled_policy_never_augments() {
    let mut rng = common::rng(0);
    for _ in 0..100 {
        assert!(AugmentPolicy::none().sample(&mut rng).is_identity());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn double_flip_is_identity(h in 1usize..12, w in 1usize..12, seed in 0u64..100) {
        let s = sample(h, w, seed);
        for spec in [
            AugmentationSpec { hflip: true, ..Default::default() },
            AugmentationSpec { vflip: true, ..Default::default() },
            AugmentationSpec { hflip: true, vflip: true, ..Default::default() },
        ] {
            let twice = augment(&augment(&s, &spec).unwrap(), &spec).unwrap();
            prop_assert_eq!(&twice, &s);
        }
    }

    #[test]
    fn flips_keep_image_and_labels_aligned(h in 1usize..10, w in 1usize..10, seed in 0u64..100) {
        let s = sample(h, w, seed);
        let f = augment(&s, &AugmentationSpec { hflip: true, vflip: true, ..Default::default() }).unwrap();
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = (h - 1 - i, w - 1 - j);
                prop_assert_eq!(f.labels.get(i, j), s.labels.get(si, sj));
                prop_assert_eq!(f.image.data()[(i * w + j) * 3], s.image.data()[(si * w + sj) * 3]);
            }
        }
    }

    #[test]
    fn intensity_ops_leave_labels_and_range_alone(
        seed in 0u64..100,
        sigma in 0.3f64..2.0,
        amount in 0.0f64..2.0,
    ) {
        let s = sample(9, 11, seed);
        let spec = AugmentationSpec { blur: Some(sigma), sharpen: Some(amount), ..Default::default() };
        let out = augment(&s, &spec).unwrap();
        prop_assert_eq!(&out.labels, &s.labels);
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn policy_sampling_is_seeded(seed in 0u64..1000) {
        let p = AugmentPolicy::default();
        let a: Vec<_> = { let mut r = common::rng(seed); (0..8).map(|_| p.sample(&mut r)).collect() };
        let b: Vec<_> = { let mut r = common::rng(seed); (0..8).map(|_| p.sample(&mut r)).collect() };
        prop_assert_eq!(a, b);
    }
}
