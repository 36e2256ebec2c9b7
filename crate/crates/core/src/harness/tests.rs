use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::{best_threshold, classification_accuracy, cosine};
use super::*;
use crate::error::Error;
use crate::facegeom::FacialMode;
use crate::numerics::{ParamRegistry, Tensor};
use crate::urfm::MappingKind;

fn small_spec(seed: u64) -> SynthFaceSpec {
    SynthFaceSpec {
        identities: 3,
        samples: 4,
        seed,
        ..SynthFaceSpec::default()
    }
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let spec = small_spec(9);
        write_dataset(d.path(), &generate_dataset(&spec).unwrap(), spec.image).unwrap();
    }
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa.len(), 3 * 4 + 2);
    assert_eq!(fa, fb);

    let other = generate_dataset(&small_spec(10)).unwrap();
    let base = generate_dataset(&small_spec(9)).unwrap();
    assert_ne!(other[0].pixels, base[0].pixels);
}

#[test]
fn dataset_roundtrips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(2);
    let samples = generate_dataset(&spec).unwrap();
    write_dataset(dir.path(), &samples, spec.image).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), samples.len());
    for (x, y) in samples.iter().zip(&back) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.label, y.label);
        assert_eq!(x.flipped, y.flipped);
        assert_eq!(x.pixels, y.pixels);
        assert_eq!(x.landmarks, y.landmarks);
        assert_eq!(x.image.to_vec(), y.image.to_vec());
    }
}

#[test]
fn flip_mirrors_pixels_and_swaps_paired_keypoints() {
    let spec = small_spec(4);
    let w = spec.image as f64;
    let plain = render_sample(&spec, 1, 2, Some(false)).unwrap();
    let flip = render_sample(&spec, 1, 2, Some(true)).unwrap();
    let side = spec.image;
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let a = plain.pixels[(c * side + y) * side + x];
                let b = flip.pixels[(c * side + y) * side + side - 1 - x];
                assert_eq!(a, b);
            }
        }
    }
    let (p, f) = (&plain.landmarks.sparse, &flip.landmarks.sparse);
    for (i, j) in [(0, 1), (1, 0), (2, 2), (3, 4), (4, 3)] {
        assert_eq!(f[i][0], w - 1.0 - p[j][0]);
        assert_eq!(f[i][1], p[j][1]);
    }
    for (a, b) in plain.landmarks.dense.iter().zip(&flip.landmarks.dense) {
        assert_eq!(b[0], w - 1.0 - a[0]);
        assert_eq!(b[1], a[1]);
    }
}

#[test]
fn thousand_images_keep_landmarks_in_bounds() {
    let spec = SynthFaceSpec {
        identities: 40,
        samples: 25,
        jitter: 3.0,
        seed: 77,
        ..SynthFaceSpec::default()
    };
    let samples = generate_dataset(&spec).unwrap();
    assert_eq!(samples.len(), 1000);
    let hi = (spec.image - 1) as f64;
    let mut flips = 0;
    for s in &samples {
        assert_eq!(s.landmarks.dense.len(), DENSE_LANDMARKS);
        assert_eq!(s.landmarks.sparse.len(), 5);
        for p in s.landmarks.dense.iter().chain(&s.landmarks.sparse) {
            assert!(
                (0.0..=hi).contains(&p[0]) && (0.0..=hi).contains(&p[1]),
                "{} {p:?}",
                s.id
            );
        }
        flips += usize::from(s.flipped);
    }
    // Binomial(1000, 0.5): six standard deviations.
    assert!((405..=595).contains(&flips), "{flips}");
}

#[test]
fn sparse_keypoints_follow_facial_layout() {
    let spec = SynthFaceSpec {
        identities: 10,
        samples: 5,
        seed: 3,
        ..SynthFaceSpec::default()
    };
    for s in generate_dataset(&spec).unwrap() {
        let k = &s.landmarks.sparse;
        // Paired keypoints are ordered left to right in image space.
        assert!(k[0][0] < k[1][0], "eyes ordered in {}", s.id);
        assert!(k[3][0] < k[4][0], "mouth corners ordered in {}", s.id);
        assert!(
            k[2][1] > k[0][1].max(k[1][1]),
            "nose below eyes in {}",
            s.id
        );
        assert!(
            k[3][1] > k[2][1] && k[4][1] > k[2][1],
            "mouth below nose in {}",
            s.id
        );
    }
}

#[test]
fn every_documented_key_roundtrips() {
    let mut cfg = RunConfig::default();
    let changes = [
        ("seed", "12"),
        ("data.identities", "7"),
        ("data.samples", "9"),
        ("data.image", "48"),
        ("data.flip_prob", "0.25"),
        ("data.noise", "0.01"),
        ("data.jitter", "0.5"),
        ("data.holdout", "0.3"),
        ("model.dim", "16"),
        ("teacher.patch", "8"),
        ("teacher.depths", "1,3"),
        ("teacher.window", "2"),
        ("teacher.heads", "4"),
        ("teacher.mlp_ratio", "3"),
        ("teacher.t", "5"),
        ("teacher.keep_final_prompts", "true"),
        ("teacher.frozen", "false"),
        ("student.channels", "4,16"),
        ("urfm.mapping", "self_attention"),
        ("urfm.L", "25"),
        ("urfm.heads", "2"),
        ("urfm.align_heads", "4"),
        ("pe.mode", "RD"),
        ("pe.alpha", "2"),
        ("pe.beta", "8"),
        ("pe.gamma", "0.75"),
        ("loss.lambda_cls", "0.5"),
        ("loss.lambda_attn", "2"),
        ("loss.lambda_feat", "0.1"),
        ("loss.align", "pixel_mse"),
        ("arcface.s", "16"),
        ("arcface.m", "0.2"),
        ("train.lr", "0.01"),
        ("train.momentum", "0.8"),
        ("train.weight_decay", "0.001"),
        ("train.warmup_epochs", "1"),
        ("train.epochs", "3"),
        ("train.batch", "4"),
        ("train.clip_norm", "2.5"),
        ("pretrain.lr", "0.2"),
        ("pretrain.warmup_epochs", "2"),
        ("pretrain.epochs", "6"),
        ("perf.samples", "10"),
        ("perf.center", "3"),
    ];
    assert_eq!(changes.len(), KEYS.len());
    for (k, v) in changes {
        let before = cfg.get(k).unwrap();
        cfg.set(k, v).unwrap();
        assert_ne!(cfg.get(k).unwrap(), before, "{k} kept its default");
    }
    let text = cfg.to_text();
    let back = RunConfig::parse(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_text(), text);
    assert!(diff_keys(&back, &cfg).is_empty());
    assert_eq!(diff_keys(&RunConfig::default(), &cfg).len(), KEYS.len());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let mut cfg = RunConfig::default();
    assert!(matches!(cfg.set("teacher.tt", "1"), Err(Error::Config(_))));
    assert!(matches!(cfg.set("teacher.t", "-1"), Err(Error::Config(_))));
    assert!(matches!(cfg.set("pe.mode", "XY"), Err(Error::Config(_))));
    assert!(matches!(cfg.apply(["urfm.L"]), Err(Error::Config(_))));
    let err = RunConfig::parse("# comment\nseed=1\nbogus=2\n").unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
    assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
}

#[test]
fn default_config_is_consistent() {
    let cfg = RunConfig::default();
    cfg.validate().unwrap();
    assert_eq!(
        cfg.teacher_config().final_grid(),
        cfg.student_config().final_grid()
    );
    let mut bad = cfg.clone();
    bad.student_channels = vec![8, 16];
    assert!(bad.validate().is_err());
    let mut bad = cfg;
    bad.teacher.keep_final_prompts = true;
    assert!(bad.validate().is_err());
}

fn registry_with(dim: usize, seed: u64) -> ParamRegistry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParamRegistry::new();
    let mut b = crate::numerics::ParamBuilder::new(&mut reg, &mut rng, "net");
    b.normal("a", &[dim, 3], 1.0).unwrap();
    b.normal("b", &[dim], 1.0).unwrap();
    reg.set_trainable("net.b", false).unwrap();
    reg
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let src = registry_with(4, 1);
    // Values that text formats tend to mangle.
    src.get("net.b")
        .unwrap()
        .set_data(&[-0.0, f64::MIN_POSITIVE, 1e300, 0.1])
        .unwrap();
    let cfg = RunConfig::default().to_text();
    Checkpoint::from_registry(cfg.clone(), &src)
        .save(&path)
        .unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config, cfg);
    assert_eq!(
        RunConfig::parse(&loaded.config).unwrap(),
        RunConfig::default()
    );
    assert!(!loaded.params[1].trainable);

    let dst = registry_with(4, 2);
    loaded.apply(&dst, LoadMode::Exact).unwrap();
    for ((_, a), (_, b)) in src.snapshot().iter().zip(dst.snapshot()) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(&b));
    }
    assert!(!dir.path().join("m.ckpt.partial").exists());
}

#[test]
fn corrupt_checkpoints_are_rejected_without_partial_load() {
    let bytes = Checkpoint::from_registry("x=1", &registry_with(4, 1)).to_bytes();
    let dst = registry_with(4, 2);
    let before = dst.snapshot();

    for cut in [0, 10, 44, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "cut {cut}: {err}");
    }
    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped),
        Err(Error::Integrity(_))
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&magic),
        Err(Error::Integrity(_))
    ));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Integrity(_))));
    assert_eq!(dst.snapshot(), before);
}

#[test]
fn mismatched_width_is_a_shape_error_and_loads_nothing() {
    let ckpt = Checkpoint::from_registry("", &registry_with(5, 1));
    let dst = registry_with(4, 2);
    let before = dst.snapshot();
    match ckpt.apply(&dst, LoadMode::Exact) {
        Err(Error::ShapeMismatch {
            name,
            expected,
            found,
        }) => {
            assert_eq!(name, "net.a");
            assert_eq!(expected, vec![4, 3]);
            assert_eq!(found, vec![5, 3]);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(dst.snapshot(), before);

    // The second block mismatches; the first must not have been written.
    let mut mixed = Checkpoint::from_registry("", &registry_with(4, 3));
    mixed.params[1].shape = vec![5];
    mixed.params[1].data = vec![0.0; 5];
    assert!(matches!(
        mixed.apply(&dst, LoadMode::Exact),
        Err(Error::ShapeMismatch { .. })
    ));
    assert_eq!(dst.snapshot(), before);
}

#[test]
fn subset_and_exact_loading() {
    let mut big = registry_with(4, 1);
    big.register("extra", Tensor::param(vec![7.0], &[1]).unwrap(), true)
        .unwrap();
    let small = Checkpoint::from_registry("", &registry_with(4, 5));
    assert!(matches!(
        small.apply(&big, LoadMode::Exact),
        Err(Error::Config(_))
    ));
    small.apply(&big, LoadMode::Subset).unwrap();
    assert_eq!(big.get("extra").unwrap().to_vec(), vec![7.0]);
    assert_eq!(big.get("net.a").unwrap().to_vec(), small.params[0].data);

    let full = Checkpoint::from_registry("", &big);
    assert!(matches!(
        full.apply(&registry_with(4, 1), LoadMode::Subset),
        Err(Error::Config(_))
    ));
    let only_a = full.filtered(|n| n == "net.a");
    assert_eq!(only_a.params.len(), 1);
}

#[test]
fn random_embeddings_verify_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels: Vec<usize> = (0..2000).map(|i| i / 10).collect();
    let emb: Vec<Vec<f64>> = labels
        .iter()
        .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let pairs = make_pairs(&labels, 3).unwrap();
    assert_eq!(pairs.len(), 2 * 200 * 9);
    assert_eq!(pairs.iter().filter(|p| p.same).count(), 200 * 9);
    for p in &pairs {
        assert_eq!(p.same, labels[p.a] == labels[p.b]);
    }
    let (acc, _) = verification_accuracy(&emb, &pairs).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn separable_embeddings_verify_perfectly() {
    let labels: Vec<usize> = (0..60).map(|i| i / 6).collect();
    let emb: Vec<Vec<f64>> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut v = vec![0.0; 10];
            v[l] = 1.0;
            v[(l + 1) % 10] = 0.01 * (i % 3) as f64;
            v
        })
        .collect();
    let weights: Vec<Vec<f64>> = (0..10)
        .map(|c| (0..10).map(|k| f64::from(u8::from(k == c))).collect())
        .collect();
    let r = evaluate(&emb, &labels, &weights, 1).unwrap();
    assert_eq!(r.verification, 1.0);
    assert_eq!(r.verification_std, 0.0);
    assert_eq!(r.classification, 1.0);
    let shifted: Vec<usize> = labels.iter().map(|l| (l + 1) % 10).collect();
    assert_eq!(
        classification_accuracy(&emb, &shifted, &weights).unwrap(),
        0.0
    );
}

#[test]
fn threshold_search_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let n = rng.random_range(2..40);
        let scored: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                (
                    (rng.random_range(0..8) as f64) / 4.0 - 1.0,
                    rng.random_bool(0.5),
                )
            })
            .collect();
        let acc = |t: f64| scored.iter().filter(|(s, y)| (*s > t) == *y).count();
        let best = (-3..=3 * 40)
            .map(|k| acc(k as f64 / 40.0 - 1.5))
            .max()
            .unwrap();
        assert_eq!(acc(best_threshold(&scored)), best);
    }
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
}

#[test]
fn split_is_per_identity() {
    let spec = SynthFaceSpec {
        identities: 4,
        samples: 10,
        ..SynthFaceSpec::default()
    };
    let ws = Workspace::from_samples(generate_dataset(&spec).unwrap(), 0.2).unwrap();
    assert_eq!(ws.train.len(), 32);
    assert_eq!(ws.test.len(), 8);
    for l in 0..4 {
        let test: Vec<usize> = ws
            .test
            .iter()
            .copied()
            .filter(|&i| ws.samples[i].label == l)
            .collect();
        assert_eq!(test, vec![l * 10 + 8, l * 10 + 9]);
    }
    let tiny = generate_dataset(&SynthFaceSpec {
        identities: 2,
        samples: 1,
        ..SynthFaceSpec::default()
    })
    .unwrap();
    assert!(Workspace::from_samples(tiny, 0.2).is_err());
}

#[test]
fn presets_and_sweeps_have_expected_shape() {
    for p in Preset::ALL {
        assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
    }
    assert!("nope".parse::<Preset>().is_err());
    let base = RunConfig::default();
    let full = Preset::Full.apply(&base);
    assert_eq!(full.urfm.mapping, MappingKind::Centers);
    assert_eq!(full.urfm.pe.mode, FacialMode::Saliency);
    assert_eq!(full.teacher.prompts, base.teacher.prompts);
    let ma = Preset::AsaMa.apply(&base);
    assert!(!ma.teacher.frozen_backbone);
    assert_eq!(ma.teacher.prompts, 0);
    let scratch = Preset::Scratch.apply(&base);
    assert!(!scratch.objective.uses_teacher());
    for p in Preset::ALL {
        p.apply(&base).validate().unwrap();
    }

    let t = sweep_configs(SweepKind::Prompts, &base);
    let labels: Vec<&str> = t.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(
        labels,
        [
            "frozen",
            "5_prompts",
            "25_prompts",
            "50_prompts",
            "all_learnable"
        ]
    );
    let prompts: Vec<(usize, bool)> = t
        .iter()
        .map(|(_, c)| (c.teacher.prompts, c.teacher.frozen_backbone))
        .collect();
    assert_eq!(
        prompts,
        [(0, true), (5, true), (25, true), (50, true), (0, false)]
    );
    assert_eq!(sweep_configs(SweepKind::Centers, &base).len(), 3);
    assert_eq!(sweep_configs(SweepKind::Mode, &base).len(), 3);
    assert_eq!("L".parse::<SweepKind>().unwrap(), SweepKind::Centers);
}

#[test]
fn sweep_table_has_one_row_per_setting() {
    let mut out = Vec::new();
    let report = EvalReport {
        verification: 0.75,
        verification_std: 0.1,
        classification: 0.5,
        pairs: 10,
    };
    let rows: Vec<SweepRow> = ["frozen", "all_learnable"]
        .iter()
        .map(|l| SweepRow {
            label: l.to_string(),
            seed: 0,
            teacher_trainable: 0,
            student: report,
            teacher: report,
        })
        .collect();
    write_sweep_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "frozen,0,0,0.750000,0.500000,0.750000,0.500000");
}
