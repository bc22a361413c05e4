use std::fs;
use std::path::Path;

use mmg_core::dataeng::{
    generate_synthetic, load_dataset, synthesize, validate_splits, Dataset, DatasetManifest,
    DatasetSpec, ExampleFiles, ExampleRecord, Split, Violation, SCHEMA_VERSION,
};
use mmg_core::numcore::Tensor;
use mmg_core::Modality;
use nalgebra::{DMatrix, DVector};

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        num_base_classes: 4,
        num_novel_classes: 3,
        examples_per_class: 12,
        novel_examples_per_class: 8,
        unlabeled_pool_size: 10,
        seed: 11,
        ..DatasetSpec::default()
    }
}

fn noiseless(mut spec: DatasetSpec) -> DatasetSpec {
    spec.class_spread = 0.0;
    spec.clip_noise = 0.0;
    for m in Modality::ALL {
        spec.modality_mut(m).noise = 0.0;
    }
    spec
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic(&small_spec(), a.path()).unwrap();
    generate_synthetic(&small_spec(), b.path()).unwrap();
    let (da, db) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(da.len(), 1 + 3 * small_spec().total_examples());
    assert!(da == db);

    let c = tempfile::tempdir().unwrap();
    let other = DatasetSpec {
        seed: 12,
        ..small_spec()
    };
    generate_synthetic(&other, c.path()).unwrap();
    assert!(dir_bytes(c.path()) != da);
}

#[test]
fn generated_dataset_loads_with_spec_totals() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let written = generate_synthetic(&spec, dir.path()).unwrap();
    let h = load_dataset(dir.path()).unwrap();
    assert_eq!(h.len(), spec.total_examples());
    let ds = h.materialize().unwrap();
    assert_eq!(ds, written);
    assert_eq!(ds.by_class(Split::Novel).len(), 3);
    let unlabeled = ds.indices(Split::Unlabeled);
    assert_eq!(unlabeled.len(), 10);
    assert!(unlabeled.iter().all(|&i| ds.examples[i].label.is_none()));
    let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    for key in [
        "schema_version",
        "base_classes",
        "novel_classes",
        "examples",
        "clip_id",
        "label",
        "split",
        "files",
    ] {
        assert!(text.contains(&format!("\"{key}\"")), "{key}");
    }
    assert!(text.contains("\"label\": null"));
    assert!(!dir.path().join("manifest.json.tmp").exists());
}

#[test]
fn spec_rejects_too_few_classes_and_negative_noise() {
    let bad = DatasetSpec {
        num_novel_classes: 1,
        ..small_spec()
    };
    assert!(synthesize(&bad).is_err());
    let mut bad = small_spec();
    bad.audio.noise = -0.1;
    assert!(synthesize(&bad).is_err());
}

#[test]
fn generated_splits_are_clean() {
    let data = synthesize(&DatasetSpec::default()).unwrap();
    let report = validate_splits(&data.dataset.manifest());
    assert!(report.is_clean(), "{report:?}");
}

fn mutated(data: &Dataset) -> DatasetManifest {
    data.manifest()
}

#[test]
fn injected_clip_overlap_is_reported_once() {
    let data = synthesize(&small_spec()).unwrap().dataset;
    let mut m = mutated(&data);
    let base_clip = m
        .examples
        .iter()
        .find(|r| r.split == Split::BaseTrain)
        .unwrap()
        .clip_id
        .clone();
    let novel = m
        .examples
        .iter_mut()
        .find(|r| r.split == Split::Novel)
        .unwrap();
    novel.clip_id = base_clip.clone();
    let report = validate_splits(&m);
    assert_eq!(
        report.violations,
        vec![Violation::ClipOverlap { clip_id: base_clip }]
    );
}

#[test]
fn injected_class_overlap_is_reported() {
    let data = synthesize(&small_spec()).unwrap().dataset;
    let mut m = mutated(&data);
    m.novel_classes.push(1);
    let report = validate_splits(&m);
    assert_eq!(
        report.violations,
        vec![Violation::ClassOverlap { class: 1 }]
    );
}

#[test]
fn injected_train_test_overlap_is_reported() {
    let data = synthesize(&small_spec()).unwrap().dataset;
    let mut m = mutated(&data);
    let mut dup = m
        .examples
        .iter()
        .find(|r| r.split == Split::BaseTrain)
        .unwrap()
        .clone();
    dup.split = Split::BaseTest;
    let id = dup.id.clone();
    m.examples.push(dup);
    let report = validate_splits(&m);
    assert_eq!(report.violations, vec![Violation::ExampleOverlap { id }]);
}

fn write_tiny(dir: &Path, records: Vec<ExampleRecord>) {
    let m = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        base_classes: vec![0, 1],
        novel_classes: vec![2, 3],
        examples: records,
    };
    m.write_atomic(dir).unwrap();
}

fn record(id: &str, label: Option<usize>, split: Split) -> ExampleRecord {
    ExampleRecord {
        id: id.into(),
        clip_id: format!("c-{id}"),
        label,
        split,
        files: ExampleFiles::for_id(id),
    }
}

fn write_files(dir: &Path, id: &str, value: f64) {
    fs::create_dir_all(dir.join(id)).unwrap();
    for m in Modality::ALL {
        let t = Tensor::matrix(2, 3, vec![value; 6]).unwrap();
        mmg_core::dataeng::write_tensor(&dir.join(format!("{id}/{m}.mmgt")), &t).unwrap();
    }
}

#[test]
fn hand_built_manifest_iterates_in_order() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), "zeta", 1.0);
    write_files(dir.path(), "alpha", 2.0);
    write_tiny(
        dir.path(),
        vec![
            record("zeta", Some(1), Split::BaseTrain),
            record("alpha", Some(3), Split::Novel),
        ],
    );
    let h = load_dataset(dir.path()).unwrap();
    let ids: Vec<String> = h.iter().map(|e| e.unwrap().id).collect();
    assert_eq!(ids, vec!["zeta", "alpha"]);
    let second = h.load_example(1).unwrap();
    assert_eq!(second.tokens(Modality::Imu).data(), &[2.0; 6]);
}

#[test]
fn missing_file_error_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), "a", 1.0);
    fs::remove_file(dir.path().join("a/audio.mmgt")).unwrap();
    write_tiny(dir.path(), vec![record("a", Some(0), Split::BaseTrain)]);
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("a/audio.mmgt"), "{err}");
}

#[test]
fn id_collision_and_bad_labels_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_files(dir.path(), "a", 1.0);
    write_tiny(
        dir.path(),
        vec![
            record("a", Some(0), Split::BaseTrain),
            record("a", Some(1), Split::BaseTest),
        ],
    );
    assert!(load_dataset(dir.path()).is_err());

    for (label, split) in [
        (Some(2), Split::BaseTrain),
        (Some(0), Split::Novel),
        (Some(0), Split::Unlabeled),
        (None, Split::BaseTest),
    ] {
        write_tiny(dir.path(), vec![record("a", label, split)]);
        assert!(load_dataset(dir.path()).is_err(), "{label:?} {split}");
    }
}

fn pinv(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.shape2().unwrap();
    let a = DMatrix::from_row_slice(r, c, t.data());
    a.pseudo_inverse(1e-12).unwrap()
}

#[test]
fn noiseless_tokens_decode_to_the_shared_latent() {
    let data = synthesize(&noiseless(small_spec())).unwrap();
    let w = &data.world;
    let inverses: Vec<_> = w.maps.iter().map(pinv).collect();
    for (ex, u) in data.dataset.examples.iter().zip(&data.latents) {
        for m in Modality::ALL {
            let t = ex.tokens(m);
            let off = w.offsets[m.index()].data();
            let y = DVector::from_iterator(t.len(), t.data().iter().zip(off).map(|(a, b)| a - b));
            let rec = &inverses[m.index()] * y;
            for (a, b) in rec.iter().zip(u) {
                // tokens are stored at 32-bit precision
                assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{m}: {a} vs {b}");
            }
        }
    }
}

/// Ridge-regression one-vs-all probe on flattened tokens.
fn probe_accuracy(ds: &Dataset, m: Modality, train: Split, test: Split) -> f64 {
    let feats = |split: Split| {
        let idx = ds.indices(split);
        let p = ds.examples[idx[0]].tokens(m).len() + 1;
        let mut x = DMatrix::zeros(idx.len(), p);
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            let e = &ds.examples[i];
            for (c, v) in e.tokens(m).data().iter().enumerate() {
                x[(r, c)] = *v;
            }
            x[(r, p - 1)] = 1.0;
            y.push(ds.base_class_index(e.label.unwrap()).unwrap());
        }
        (x, y)
    };
    let c = ds.base_classes.len();
    let (x, y) = feats(train);
    let mut target = DMatrix::zeros(x.nrows(), c);
    for (r, &k) in y.iter().enumerate() {
        target[(r, k)] = 1.0;
    }
    let gram = x.transpose() * &x + DMatrix::identity(x.ncols(), x.ncols()) * 1e-3;
    let w = gram.cholesky().unwrap().solve(&(x.transpose() * target));
    let (xt, yt) = feats(test);
    let scores = xt * w;
    let correct = (0..scores.nrows())
        .filter(|&r| scores.row(r).transpose().argmax().0 == yt[r])
        .count();
    correct as f64 / yt.len() as f64
}

#[test]
fn noiseless_classes_are_linearly_separable() {
    let data = synthesize(&noiseless(DatasetSpec::default())).unwrap();
    for m in Modality::ALL {
        let acc = probe_accuracy(&data.dataset, m, Split::BaseTrain, Split::BaseTrain);
        assert_eq!(acc, 1.0, "{m}");
    }
}

#[test]
fn probe_accuracy_follows_modality_noise() {
    let data = synthesize(&DatasetSpec::default()).unwrap();
    let acc: Vec<f64> = Modality::ALL
        .iter()
        .map(|&m| probe_accuracy(&data.dataset, m, Split::BaseTrain, Split::BaseTest))
        .collect();
    eprintln!("probe accuracy video/audio/imu: {acc:?}");
    assert!(acc[0] > acc[1] && acc[1] > acc[2], "{acc:?}");
    assert!(acc[2] > 1.0 / 20.0);
}
