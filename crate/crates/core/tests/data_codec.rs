use ldt_core::codec::{train_codec, CodecConfig, CodecTrainConfig};
use ldt_core::data::{make_dataset, read_dump, stack, write_dump, DatasetSpec, LabeledImage};

fn centered(x: &[f32]) -> Vec<f64> {
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
    x.iter().map(|&v| v as f64 - mean).collect()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn classes_are_separable_by_template_correlation() {
    let spec = |seed| DatasetSpec { count_per_class: 100, seed, ..DatasetSpec::default() };
    let train = make_dataset(&spec(11)).unwrap();
    let test = make_dataset(&spec(12)).unwrap();
    let k = 8;
    let size = train[0].pixels.len();
    let mut templates = vec![vec![0f32; size]; k];
    for im in &train {
        for (t, &v) in templates[im.label].iter_mut().zip(im.pixels.data()) {
            *t += v / 100.0;
        }
    }
    let templates: Vec<Vec<f64>> = templates.iter().map(|t| centered(t)).collect();
    let correct = test
        .iter()
        .filter(|im| {
            let x = centered(im.pixels.data());
            let best = (0..k)
                .max_by(|&a, &b| correlation(&x, &templates[a]).total_cmp(&correlation(&x, &templates[b])))
                .unwrap();
            best == im.label
        })
        .count();
    let accuracy = correct as f64 / test.len() as f64;
    assert!(accuracy >= 0.95, "template accuracy {accuracy}");
}

#[test]
fn dump_roundtrip() {
    let ds = make_dataset(&DatasetSpec { count_per_class: 2, image_hw: 8, num_classes: 3, seed: 4 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.ldtd");
    write_dump(&path, 3, &ds).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"LDTD");
    assert_eq!(bytes.len(), 20 + ds.len() * (2 + 8 * 8 * 3 * 4));
    // First record: label, then pixel (0, 0) channels 0..3 in order.
    assert_eq!(u16::from_le_bytes([bytes[20], bytes[21]]), 0);
    let g = f32::from_le_bytes(bytes[26..30].try_into().unwrap());
    assert_eq!(g, ds[0].pixels.data()[64]);
    let (k, back) = read_dump(&path).unwrap();
    assert_eq!(k, 3);
    assert_eq!(back, ds);

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_dump(&path).is_err());
}

#[test]
fn trained_linear_codec_reconstructs_dataset() {
    let ds = make_dataset(&DatasetSpec::default()).unwrap();
    let (codec, log) = train_codec(&CodecConfig::default(), &ds, &CodecTrainConfig::default()).unwrap();
    let held_out = make_dataset(&DatasetSpec { count_per_class: 32, seed: 99, ..DatasetSpec::default() }).unwrap();
    let refs: Vec<&LabeledImage> = held_out.iter().collect();
    let (x, _) = stack(&refs).unwrap();
    let mse = codec.reconstruction_error(&x).unwrap();
    assert!(mse < 0.01, "reconstruction mse {mse}");
    assert!(log.losses.last().unwrap() < &(0.5 * log.losses[0]));
}
