use slicemil::data::{checksum_dir, generate_synthetic, generate_volumes, load_volumes, DomainParams, SyntheticSpec};

#[test]
fn domain_offset_shows_in_mean_intensity() {
    let a = DomainParams::preset(0);
    let b = DomainParams {
        name: "B".into(),
        offset: a.offset + 0.4,
        ..a.clone()
    };
    let spec = SyntheticSpec {
        seed: 3,
        patients: 40,
        domains: vec![a, b],
        ..SyntheticSpec::default()
    };
    let mean_of = |domain: &str| {
        let (sum, count) = generate_volumes(&spec)
            .unwrap()
            .iter()
            .filter(|g| g.volume.domain == domain)
            .flat_map(|g| g.volume.slices.iter())
            .fold((0.0, 0usize), |(s, n), slice| (s + slice.sum(), n + slice.len()));
        sum / count as f64
    };
    let diff = mean_of("B") - mean_of("A");
    assert!((diff - 0.4).abs() < 0.05, "difference {diff}");
}

#[test]
fn same_seed_same_files_and_round_trip() {
    let spec = SyntheticSpec {
        seed: 7,
        patients: 6,
        ..SyntheticSpec::default()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest = generate_synthetic(&spec, d1.path()).unwrap();
    generate_synthetic(&spec, d2.path()).unwrap();
    assert_eq!(checksum_dir(d1.path()).unwrap(), checksum_dir(d2.path()).unwrap());

    let other = SyntheticSpec { seed: 8, ..spec.clone() };
    let d3 = tempfile::tempdir().unwrap();
    generate_synthetic(&other, d3.path()).unwrap();
    assert_ne!(checksum_dir(d1.path()).unwrap(), checksum_dir(d3.path()).unwrap());

    // slices survive the 16-bit PNG round trip to within quantisation
    let loaded = load_volumes(&manifest).unwrap();
    let generated = generate_volumes(&spec).unwrap();
    for (l, g) in loaded.iter().zip(&generated) {
        assert_eq!(l.patient_id, g.volume.patient_id);
        assert_eq!(l.label, g.volume.label);
        for (a, b) in l.slices.iter().zip(&g.volume.slices) {
            let worst = a.iter().zip(b).map(|(x, y)| (x - y.max(0.0)).abs()).fold(0.0, f64::max);
            assert!(worst <= 0.5e-4 + 1e-12, "{worst}");
        }
    }
}
