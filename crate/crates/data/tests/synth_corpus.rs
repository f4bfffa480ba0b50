use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ddnet_core::VOID;
use ddnet_data::corpus::{self, load_corpus};
use ddnet_data::pngio::{self, Rgb8};
use ddnet_data::{split_ids, synth_dataset, Palette, SynthSpec};

fn small_spec(images: usize) -> SynthSpec {
    SynthSpec {
        images,
        ..SynthSpec::tiny()
    }
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "images", "labels"] {
        let dir = root.join(sub);
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn requested_ratio_is_met_within_ten_percent() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&small_spec(40), 7, dir.path()).unwrap();
    let ratio = m.totals[0] as f64 / m.totals[2] as f64;
    assert!((ratio / 20.0 - 1.0).abs() <= 0.10, "ratio {ratio}");
    let ratio = m.totals[1] as f64 / m.totals[2] as f64;
    assert!((ratio / 5.0 - 1.0).abs() <= 0.10, "ratio {ratio}");
    assert!(!m.degenerate);
    assert_eq!(m.totals.iter().sum::<u64>(), 40 * 64 * 64);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_dataset(&small_spec(6), 3, a.path()).unwrap();
    synth_dataset(&small_spec(6), 3, b.path()).unwrap();
    synth_dataset(&small_spec(6), 4, c.path()).unwrap();
    let (ta, tb, tc) = (tree_bytes(a.path()), tree_bytes(b.path()), tree_bytes(c.path()));
    assert_eq!(ta.len(), 2 * 6 + 2);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn single_class_is_flagged_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::tiny().with_classes(1);
    let m = synth_dataset(&SynthSpec { images: 2, ..spec }, 0, dir.path()).unwrap();
    assert!(m.degenerate);
    assert_eq!(m.totals, vec![2 * 64 * 64]);
}

#[test]
fn loading_reproduces_manifest_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&small_spec(8), 11, dir.path()).unwrap();
    let corpus = corpus::open(dir.path()).unwrap();
    assert_eq!(corpus.len(), 8);
    for (sample, entry) in corpus.iter().zip(&m.images) {
        let s = sample.unwrap();
        assert_eq!(s.id, entry.id);
        let hist = s.label.histogram();
        assert_eq!(&hist[..3], &entry.counts[..]);
        assert_eq!(hist[usize::from(VOID)], entry.void);
        assert_eq!(s.image.shape().dims(), [1, 3, 64, 64]);
    }
    assert_eq!(corpus.unknown_pixels(), 0);
}

#[test]
fn empty_directory_is_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = load_corpus(dir.path(), Palette::default_for(3)).unwrap();
    assert!(corpus.is_empty());
    assert_eq!(corpus.iter().count(), 0);
}

#[test]
fn unknown_colors_become_void_and_are_counted() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::create_dir_all(dir.path().join("labels")).unwrap();
    let palette = Palette::default_for(2);
    let c0 = palette.color_of(0).unwrap();
    let c1 = palette.color_of(1).unwrap();
    let img = Rgb8 {
        height: 1,
        width: 3,
        data: vec![0; 9],
    };
    pngio::write_rgb(&dir.path().join("images/a.png"), &img).unwrap();
    let label = Rgb8 {
        height: 1,
        width: 3,
        data: [c0, [1, 2, 3], c1].concat(),
    };
    pngio::write_rgb(&dir.path().join("labels/a.png"), &label).unwrap();
    let corpus = load_corpus(dir.path(), palette).unwrap();
    let s = corpus.load("a").unwrap();
    assert_eq!(s.label.data(), &[0, VOID, 1]);
    assert_eq!(corpus.unknown_pixels(), 1);
}

#[test]
fn missing_label_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(&small_spec(2), 0, dir.path()).unwrap();
    fs::remove_file(dir.path().join("labels/img_00001.png")).unwrap();
    let err = corpus::open(dir.path()).unwrap_err();
    assert!(matches!(err, ddnet_data::DataError::MissingPair { ref id, .. } if id == "img_00001"));
}

#[test]
fn shuffled_order_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(&small_spec(6), 0, dir.path()).unwrap();
    let corpus = corpus::open(dir.path()).unwrap();
    let order = |seed| corpus.shuffled(seed).map(|s| s.unwrap().id).collect::<Vec<_>>();
    assert_eq!(order(5), order(5));
    let mut sorted = order(5);
    sorted.sort();
    assert_eq!(sorted, corpus.ids());
}

#[test]
fn split_is_eighty_twenty_and_stable() {
    let ids: Vec<String> = (0..250).map(|i| format!("img_{i:05}")).collect();
    let (train, eval) = split_ids(&ids, 0.2);
    assert_eq!((train.len(), eval.len()), (200, 50));
    assert!(train.iter().all(|t| !eval.contains(t)));
    assert_eq!(split_ids(&ids, 0.2), (train, eval));
}

#[test]
fn manifest_frequencies_feed_median_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&small_spec(5), 2, dir.path()).unwrap();
    let f = m.class_frequencies(None);
    let pixels: u64 = f.iter().map(|c| c.pixels).sum();
    assert_eq!(pixels, 5 * 64 * 64);
    assert!(f.iter().all(|c| c.presence_pixels == 5 * 64 * 64));
}
