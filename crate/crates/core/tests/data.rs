use squant::io::idx::{encode_idx, load_idx, IMAGES_MAGIC};
use squant::io::{gen_synthetic, DataSpec, SyntheticSpec};
use squant::Error;

#[test]
fn synthetic_is_deterministic_per_seed() {
    let spec = SyntheticSpec::new(2, 8, 8, 100);
    let a = gen_synthetic(&spec, 7).unwrap();
    let b = gen_synthetic(&spec, 7).unwrap();
    let bytes = |d: &squant::io::DatasetHandle| {
        d.images
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .chain(d.labels.iter().flat_map(|l| (*l as u32).to_le_bytes()))
            .collect::<Vec<u8>>()
    };
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(a.images.shape(), &[100, 1, 8, 8]);
    let c = gen_synthetic(&spec, 8).unwrap();
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn synthetic_class_proportions_are_exact() {
    let mut spec = SyntheticSpec::new(3, 6, 6, 101);
    spec.proportions = Some(vec![0.5, 0.3, 0.2]);
    let d = gen_synthetic(&spec, 1).unwrap();
    // 50.5 / 30.3 / 20.2: floors 50, 30, 20; the spare sample goes to the
    // largest remainder
    assert_eq!(d.class_counts(), vec![51, 30, 20]);
    assert_eq!(d.class_counts(), spec.class_counts());

    let d = gen_synthetic(&SyntheticSpec::new(4, 6, 6, 40), 2).unwrap();
    assert_eq!(d.class_counts(), vec![10; 4]);
}

#[test]
fn synthetic_classes_are_separable_by_template() {
    // nearest class mean on noise-free prototypes beats chance by far
    let mut spec = SyntheticSpec::new(4, 8, 8, 400);
    spec.noise = 0.1;
    let d = gen_synthetic(&spec, 3).unwrap();
    let px = 64;
    let mut means = vec![vec![0.0f64; px]; 4];
    let counts = d.class_counts();
    for (i, &l) in d.labels.iter().enumerate() {
        for p in 0..px {
            means[l][p] += d.images.data()[i * px + p] as f64 / counts[l] as f64;
        }
    }
    let correct = d
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let x = &d.images.data()[i * px..(i + 1) * px];
            let dist = |m: &Vec<f64>| {
                x.iter()
                    .zip(m)
                    .map(|(a, b)| (*a as f64 - b).powi(2))
                    .sum::<f64>()
            };
            (0..4)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap()
                == l
        })
        .count();
    assert!(correct as f64 / 400.0 > 0.6, "{correct}/400");
}

#[test]
fn idx_fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = vec![0, 255, 17, 3, 9, 8, 7, 6, 100, 101, 102, 200];
    let (img, lab) = encode_idx(&pixels, 3, 2, 2, &[2, 0, 1]);
    assert_eq!(&img[..4], &IMAGES_MAGIC.to_be_bytes());
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    std::fs::write(&ip, &img).unwrap();
    std::fs::write(&lp, &lab).unwrap();
    let d = load_idx(&ip, &lp, 3).unwrap();
    assert_eq!(d.images.shape(), &[3, 1, 2, 2]);
    let want: Vec<f32> = pixels.iter().map(|&p| p as f32).collect();
    assert_eq!(d.images.data(), &want[..]);
    assert_eq!(d.labels, vec![2, 0, 1]);
}

#[test]
fn malformed_idx_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = encode_idx(&[1, 2, 3, 4], 1, 2, 2, &[0]);
    let cases: Vec<(Vec<u8>, Vec<u8>)> = vec![
        // swapped magics
        (lab.clone(), img.clone()),
        // truncated header
        (img[..10].to_vec(), lab.clone()),
        // body shorter than the header says
        (img[..img.len() - 1].to_vec(), lab.clone()),
        // label count mismatch
        (img.clone(), encode_idx(&[], 0, 1, 1, &[0, 1]).1),
        // label out of range for 10 classes
        (img.clone(), encode_idx(&[], 0, 1, 1, &[12]).1),
    ];
    for (i, (im, la)) in cases.into_iter().enumerate() {
        let (ip, lp) = (
            dir.path().join(format!("i{i}")),
            dir.path().join(format!("l{i}")),
        );
        std::fs::write(&ip, im).unwrap();
        std::fs::write(&lp, la).unwrap();
        assert!(
            matches!(load_idx(&ip, &lp, 10), Err(Error::Format(_))),
            "case {i}"
        );
    }
}

#[test]
fn data_spec_normalizes_with_training_statistics() {
    let spec = DataSpec::Synthetic {
        spec: SyntheticSpec::new(3, 6, 6, 90),
        n_test: 30,
    };
    let (train, test) = spec.load(4).unwrap();
    let test = test.unwrap();
    let n = train.images.numel() as f64;
    let mean = train.images.data().iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = train
        .images
        .data()
        .iter()
        .map(|v| (*v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    assert!(mean.abs() < 1e-5);
    assert!((var - 1.0).abs() < 1e-4);
    assert_eq!(train.normalization, test.normalization);
    assert_eq!(test.len(), 30);

    let json = serde_json::to_value(&spec).unwrap();
    assert_eq!(json["kind"], "synthetic");
    let back: DataSpec = serde_json::from_value(json).unwrap();
    assert_eq!(back, spec);
}
