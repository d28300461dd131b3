use max360iq::data::*;
use max360iq::sphere::ViewingCondition;
use proptest::prelude::*;

fn small(mode: SynthMode, seed: u64) -> SynthSpec {
    SynthSpec { n_scenes: 3, width: 32, height: 16, mode, scanpath_len: 40, seed, ..SynthSpec::default() }
}

fn entries_for(scenes: usize) -> Vec<ManifestEntry> {
    (0..scenes)
        .flat_map(|s| {
            (0..3).map(move |i| ManifestEntry {
                image_id: format!("s{s}_{i}"),
                scene_id: format!("s{s}"),
                erp_path: format!("s{s}_{i}.png").into(),
                mos: 1.0 + i as f64,
                distortion_tag: String::new(),
                scanpaths: Vec::new(),
            })
        })
        .collect()
}

#[test]
fn manifest_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&small(SynthMode::Nonuniform, 1), dir.path()).unwrap();
    let (header, entries) = load_manifest(&manifest).unwrap();
    let (h0, e0, imgs) = synthesize(&small(SynthMode::Nonuniform, 1)).unwrap();
    assert_eq!(header, h0);
    assert_eq!(entries.len(), e0.len());
    for (a, b) in entries.iter().zip(&e0) {
        assert_eq!((&a.image_id, &a.scene_id, a.mos), (&b.image_id, &b.scene_id, b.mos));
        assert_eq!(a.scanpaths, b.scanpaths);
        assert!(a.erp_path.exists());
    }
    let ds = Dataset::load(&manifest).unwrap();
    // 8-bit quantization on the way through PNG
    for (a, b) in ds.images.iter().zip(&imgs) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
    }
}

#[test]
fn manifest_errors() {
    let p = std::path::Path::new("m.csv");
    let none = |_: &std::path::Path| -> max360iq::Result<String> { unreachable!() };
    let header = r#"{"schema":1,"mos_scale":[1.0,5.0],"conditions":[]}"#;
    let cols = "image_id,scene_id,erp_path,mos,distortion_tag,scanpath_path";
    let ok = format!("{header}\n{cols}\na,s,a.png,3.0,blur1,\n");
    assert_eq!(parse_manifest(&ok, p, p, none).unwrap().1.len(), 1);

    let dup = format!("{header}\n{cols}\na,s,a.png,3.0,,\na,s,b.png,2.0,,\n");
    assert!(parse_manifest(&dup, p, p, none).unwrap_err().to_string().contains("duplicate"));
    let nan = format!("{header}\n{cols}\na,s,a.png,NaN,,\n");
    assert!(parse_manifest(&nan, p, p, none).is_err());
    let schema = format!("{}\n{cols}\n", header.replace("\"schema\":1", "\"schema\":9"));
    assert!(parse_manifest(&schema, p, p, none).is_err());
    let scale = format!("{}\n{cols}\n", header.replace("[1.0,5.0]", "[5.0,1.0]"));
    assert!(parse_manifest(&scale, p, p, none).is_err());
    assert!(load_manifest(std::path::Path::new("/nonexistent/manifest.csv")).is_err());
}

#[test]
fn sidecar_must_match_image() {
    let p = std::path::Path::new("m.csv");
    let header = r#"{"schema":1,"mos_scale":[1.0,5.0],"conditions":["Good5s"]}"#;
    let text = format!("{header}\nimage_id,scene_id,erp_path,mos,distortion_tag,scanpath_path\na,s,a.png,3.0,,a.json\n");
    let other = r#"{"image_id":"b","scanpaths":[]}"#;
    assert!(parse_manifest(&text, p, p, |_| Ok(other.to_string())).is_err());
}

#[test]
fn split_ten_scenes_eight_two() {
    let entries = entries_for(10);
    let (train, test) = split_train_test(&entries, TRAIN_RATIO, 3).unwrap();
    let scenes = |v: &[ManifestEntry]| v.iter().map(|e| e.scene_id.clone()).collect::<std::collections::BTreeSet<_>>();
    assert_eq!(scenes(&train).len(), 8);
    assert_eq!(scenes(&test).len(), 2);
    assert!(scenes(&train).is_disjoint(&scenes(&test)));
    assert_eq!(train.len() + test.len(), entries.len());
    let again = split_train_test(&entries, TRAIN_RATIO, 3).unwrap();
    assert_eq!(train, again.0);
    assert!(split_train_test(&entries_for(1), 0.8, 0).is_err());
    assert!(split_train_test(&entries, 1.0, 0).is_err());
}

#[test]
fn synthesis_is_deterministic() {
    let (_, a, ia) = synthesize(&small(SynthMode::Nonuniform, 7)).unwrap();
    let (_, b, ib) = synthesize(&small(SynthMode::Nonuniform, 7)).unwrap();
    assert_eq!(a, b);
    assert!(ia.iter().zip(&ib).all(|(x, y)| x.data() == y.data()));
    let (_, c, _) = synthesize(&small(SynthMode::Nonuniform, 8)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn uniform_scores_fall_with_level() {
    let (_, entries, _) = synthesize(&small(SynthMode::Uniform, 2)).unwrap();
    for d in ["blur", "noise"] {
        let mos: Vec<f64> = (1..=3).map(|l| entries.iter().find(|e| e.distortion_tag == format!("{d}{l}")).unwrap().mos).collect();
        assert!(mos.windows(2).all(|w| w[0] > w[1]), "{d}: {mos:?}");
        assert!(mos.iter().all(|m| (MOS_MIN..=MOS_MAX).contains(m)));
    }
}

#[test]
fn bad_start_never_beats_good_start() {
    for seed in 0..4 {
        let spec = SynthSpec { recency_weighting: Some(3.0), ..small(SynthMode::Nonuniform, seed) };
        let (_, entries, _) = synthesize(&spec).unwrap();
        for e in &entries {
            let mos = |c| e.scanpaths.iter().find(|s| s.scanpath.condition == c).unwrap().mos.unwrap();
            assert!(mos(ViewingCondition::Bad5s) <= mos(ViewingCondition::Good5s) + 1e-12, "{}", e.image_id);
        }
    }
}

#[test]
fn samples_follow_extraction_mode() {
    let (_, entries, images) = synthesize(&small(SynthMode::Nonuniform, 4)).unwrap();
    let cfg = ExtractionConfig { k: 3, size: 8, ..ExtractionConfig::default() };
    let s = build_samples::<f32>(&entries[..2], &images[..2], &cfg).unwrap();
    assert_eq!(s.len(), 8);
    assert_eq!(s[0].sequence.viewports.shape(), &[3, 3, 8, 8]);
    assert_eq!(s[0].mos, entries[0].scanpaths[0].mos.unwrap());
    let eq = ExtractionConfig { mode: ExtractionMode::Equator, ..cfg };
    let s = build_samples::<f64>(&entries[..2], &images[..2], &eq).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s[1].mos, entries[1].mos);
    let (_, uni, uimg) = synthesize(&small(SynthMode::Uniform, 4)).unwrap();
    assert!(build_samples::<f64>(&uni, &uimg, &cfg).is_err());
    assert!("spiral".parse::<ExtractionMode>().is_err());
}

#[test]
fn spec_validation() {
    assert!(SynthSpec { width: 31, ..SynthSpec::default() }.validate().is_err());
    assert!(SynthSpec { levels: vec![4], ..SynthSpec::default() }.validate().is_err());
    assert!(SynthSpec { n_scenes: 0, ..SynthSpec::default() }.validate().is_err());
    assert!(SynthSpec::default().validate().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recency_label_is_a_weighted_mean(q in prop::collection::vec(1.0f64..5.0, 1..50), lambda in -5.0f64..5.0) {
        let l = recency_label(&q, lambda);
        let lo = q.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(l >= lo - 1e-12 && l <= hi + 1e-12);
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        prop_assert!((recency_label(&q, 0.0) - mean).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_scenes(scenes in 2usize..30, seed in any::<u64>(), ratio in 0.05f64..0.95) {
        let entries = entries_for(scenes);
        let (train, test) = split_train_test(&entries, ratio, seed).unwrap();
        prop_assert!(!train.is_empty() && !test.is_empty());
        prop_assert_eq!(train.len() + test.len(), entries.len());
        prop_assert!(train.iter().all(|a| test.iter().all(|b| a.scene_id != b.scene_id)));
    }
}
