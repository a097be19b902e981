//! Directory scanning at full dataset scale, split arithmetic, corpus
//! determinism and learnability, and batch coverage.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use levitmc::bin2img::{bytes_to_grid, decode_png, encode_png, grid_to_bytes};
use levitmc::data::{iterate_batches, scan_dir, split, synth_generate, Manifest, Split, SynthSpec};

const FAMILIES: [&str; 25] = [
    "Adposhel", "Agent", "Allaple", "Amonetize", "Androm", "Autorun", "BrowseFox", "Dinwod", "Elex",
    "Expiro", "Fasong", "HackKMS", "Hlux", "Injector", "InstallCore", "MultiPlug", "Neoreklami",
    "Neshta", "Regrun", "Sality", "Snarasite", "Stantinko", "VBA", "VBKrypt", "Vilsel",
];

fn write_class(root: &Path, class: &str, count: usize, png: &[u8]) {
    let dir = root.join(class);
    fs::create_dir_all(&dir).unwrap();
    for i in 0..count {
        fs::write(dir.join(format!("{i:04}.png")), png).unwrap();
    }
}

#[test]
fn full_layout_scan_and_split() {
    let root = tempfile::tempdir().unwrap();
    let png = encode_png(&bytes_to_grid(&[1, 2, 3, 4, 5, 6]).unwrap()).unwrap();
    write_class(root.path(), "benign", 1832, &png);
    for (i, f) in FAMILIES.iter().enumerate() {
        write_class(root.path(), f, if i == 24 { 490 } else { 496 }, &png);
    }
    let m = scan_dir(root.path()).unwrap();
    assert_eq!(m.records.len(), 14_226);
    assert_eq!(m.class_index.discovered(), 26);
    assert!(m.class_index.warnings().is_empty());
    assert_eq!(m.class_counts(None)[m.class_index.benign_index()], 1832);
    assert!(m.records.iter().all(|r| r.orig_len == 6));

    let s = split(&m, 0.7, 11).unwrap();
    let train = s.class_counts(Some(Split::Train));
    let val = s.class_counts(Some(Split::Val));
    let benign = s.class_index.benign_index();
    assert_eq!((train[benign], val[benign]), (1282, 550));
    let agent = s.class_index.label_of("Agent").unwrap();
    assert_eq!((train[agent], val[agent]), (347, 149));
    let last = s.class_index.label_of("Vilsel").unwrap();
    assert_eq!((train[last], val[last]), (343, 147));
    let ids: HashSet<_> = s.records.iter().map(|r| &r.id).collect();
    assert_eq!(ids.len(), 14_226);
    assert!(s.records.iter().all(|r| r.split.is_some()));
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthetic_corpus_is_reproducible_and_decodable() {
    let spec = SynthSpec {
        seed: 7,
        ..SynthSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = synth_generate(&spec, a.path()).unwrap();
    synth_generate(&spec, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 4 * 16 + 16 + 1);
    assert_eq!(ta, tb);

    for r in m.records.iter().step_by(7) {
        let grid = decode_png(&fs::read(m.resolve(r)).unwrap(), r.pad_bytes).unwrap();
        let bytes = grid_to_bytes(&grid).unwrap();
        assert_eq!(bytes.len(), r.orig_len);
        let (class, index) = r.id.split_once('/').unwrap();
        let family = class.strip_prefix("family_").map(|f| f.parse().unwrap());
        assert_eq!(bytes, spec.sample_bytes(family, index.parse().unwrap()));
    }
}

fn histogram(bytes: &[u8]) -> [f64; 256] {
    let mut h = [0.0; 256];
    for &b in bytes {
        h[b as usize] += 1.0;
    }
    h.map(|c| c / bytes.len() as f64)
}

#[test]
fn nearest_centroid_on_byte_histograms_separates_families() {
    let spec = SynthSpec {
        samples_per_family: 32,
        max_len: 16384,
        ..SynthSpec::default()
    };
    let mut centroids = vec![[0.0; 256]; spec.families];
    let fit = spec.samples_per_family / 2;
    for (f, c) in centroids.iter_mut().enumerate() {
        for i in 0..fit {
            for (acc, v) in c.iter_mut().zip(histogram(&spec.sample_bytes(Some(f), i))) {
                *acc += v / fit as f64;
            }
        }
    }
    let (mut right, mut total) = (0, 0);
    for f in 0..spec.families {
        for i in fit..spec.samples_per_family {
            let h = histogram(&spec.sample_bytes(Some(f), i));
            let dist = |c: &[f64; 256]| c.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let guess = (0..spec.families)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            right += usize::from(guess == f);
            total += 1;
        }
    }
    let acc = right as f64 / total as f64;
    assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
}

#[test]
fn every_training_record_appears_once_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        samples_per_family: 12,
        benign_samples: 10,
        max_len: 4096,
        ..SynthSpec::default()
    };
    let m = split(&synth_generate(&spec, dir.path()).unwrap(), 0.7, 3).unwrap();
    m.save(dir.path().join("split.jsonl")).unwrap();
    let m = Manifest::load(dir.path().join("split.jsonl")).unwrap();
    let want: HashSet<String> = m.select(Some(Split::Train)).iter().map(|r| r.id.clone()).collect();
    for epoch in 0..3 {
        let mut seen = Vec::new();
        for b in iterate_batches(&m, Some(Split::Train), 8, 5, epoch).unwrap() {
            let b = b.unwrap();
            assert_eq!(b.images.shape()[0], b.ids.len());
            assert_eq!(b.labels.len(), b.ids.len());
            seen.extend(b.ids);
        }
        let unique: HashSet<String> = seen.iter().cloned().collect();
        assert_eq!(unique.len(), seen.len(), "duplicate in epoch {epoch}");
        assert_eq!(unique, want);
    }
}
