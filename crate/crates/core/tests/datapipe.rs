use std::path::Path;
use std::time::Instant;

use image::DynamicImage;
use nsd_core::datapipe::{
    make_manifest, nyu40_to_class, preprocess_scene, read_crop_manifest, write_crop, write_crop_manifest,
    InstanceMap, LabelMap, PairDataset, PreprocessConfig, RetentionRule, RoomType, ScenePair, SourceScene, Split,
    SplitSelector,
};
use nsd_core::layout::ClassVocabulary;
use nsd_core::synthetic::{left_furnished_view, render_view, write_structured3d_scene, FixtureObject};
use nsd_core::Error;

const SRC: (u32, u32) = (1280, 720);

fn scene(objects: &[FixtureObject]) -> SourceScene {
    let v = render_view(SRC.0, SRC.1, objects).unwrap();
    SourceScene {
        scene_id: 7,
        room_id: "1".into(),
        position: "0".into(),
        room_type: RoomType::Bedroom,
        empty: v.empty,
        decorated: v.full,
        semantic: LabelMap::from_color_render(&v.semantic),
        instance: InstanceMap::from_image(&DynamicImage::ImageLuma16(v.instance)),
    }
}

/// Foreground pixel counts of a resized source, recomputed without the
/// pipeline: nearest pixel-centre sampling, then per-(instance, class)
/// totals over the frame and inside the crop window.
struct Validator {
    totals: std::collections::BTreeMap<(u32, usize), u64>,
    classes: Vec<Option<usize>>,
    labels: Vec<u16>,
    ids: Vec<u32>,
}

const RW: usize = 456;
const RH: usize = 256;
const C: usize = 256;

impl Validator {
    fn new(src: &SourceScene, vocab: &ClassVocabulary) -> Self {
        let (sw, sh) = (src.semantic.width, src.semantic.height);
        let mut labels = Vec::with_capacity(RW * RH);
        let mut ids = Vec::with_capacity(RW * RH);
        for y in 0..RH {
            let sy = ((y as f64 + 0.5) * sh as f64 / RH as f64).floor() as usize;
            for x in 0..RW {
                let sx = ((x as f64 + 0.5) * sw as f64 / RW as f64).floor() as usize;
                labels.push(src.semantic.get(sx, sy));
                ids.push(src.instance.get(sx, sy));
            }
        }
        let classes = (0..=40).map(|l| nyu40_to_class(l, vocab)).collect::<Vec<_>>();
        let mut totals = std::collections::BTreeMap::new();
        for i in 0..RW * RH {
            if let Some(c) = classes[labels[i] as usize] {
                *totals.entry((ids[i], c)).or_insert(0) += 1;
            }
        }
        Self { totals, classes, labels, ids }
    }

    fn inside(&self, x0: usize) -> std::collections::BTreeMap<(u32, usize), u64> {
        let mut m = std::collections::BTreeMap::new();
        let y0 = (RH - C) / 2;
        for y in y0..y0 + C {
            for x in x0..x0 + C {
                let i = y * RW + x;
                if let Some(c) = self.classes[self.labels[i] as usize] {
                    *m.entry((self.ids[i], c)).or_insert(0) += 1;
                }
            }
        }
        m
    }

    fn union_retention(&self, x0: usize) -> f64 {
        self.inside(x0).values().sum::<u64>() as f64 / self.totals.values().sum::<u64>() as f64
    }

    fn check(&self, pair: &ScenePair) {
        let x0 = pair.crop_x as usize;
        assert!(self.inside(x0).len() >= 4, "crop {x0} keeps fewer than 4 objects");
        assert!(pair.objects.len() >= 4);
        assert!(self.union_retention(x0) >= 0.6, "crop {x0} keeps {:.3}", self.union_retention(x0));
        assert_eq!((pair.empty.width, pair.empty.height), (C, C));
        assert_eq!((pair.decorated.width, pair.decorated.height), (C, C));
    }
}

#[test]
fn fully_contained_objects_keep_every_foreground_pixel() {
    let vocab = ClassVocabulary::default();
    let src = scene(&left_furnished_view());
    let pairs = preprocess_scene(&src, &vocab, &PreprocessConfig::default()).unwrap();
    let v = Validator::new(&src, &vocab);
    assert_eq!(pairs[0].crop_x, 0);
    assert_eq!(v.union_retention(0), 1.0);
    assert_eq!(pairs[0].objects.len(), 4);
    for p in &pairs {
        v.check(p);
    }
    let total: u64 = pairs[0].objects.iter().map(|o| o.mask_area).sum();
    assert_eq!(total, v.totals.values().sum::<u64>());
}

/// Four small objects on the far left and one large object centred on the
/// right edge of the leftmost crop window.
fn split_fixture() -> Vec<FixtureObject> {
    let mut objs: Vec<FixtureObject> =
        (0..4).map(|i| FixtureObject::new([4, 6, 11, 35][i], i as u16 + 1, 20, 60 + 150 * i as u32, 80, 120 + 150 * i as u32)).collect();
    // Resized column 256 sits at source x = 256 * 1280 / 456.
    let centre = (256.0 * 1280.0 / 456.0f64).round() as u32;
    objs.push(FixtureObject::new(6, 9, centre - 200, 60, centre + 200, 700));
    objs
}

#[test]
fn an_object_split_across_the_crop_edge_disqualifies_that_position() {
    let vocab = ClassVocabulary::default();
    let src = scene(&split_fixture());
    let v = Validator::new(&src, &vocab);
    let inside = v.inside(0);
    let big = (9u32, vocab.index_of("sofa").unwrap());
    let kept = inside[&big] as f64 / v.totals[&big] as f64;
    assert!((kept - 0.5).abs() < 0.01, "split fixture keeps {kept}");
    assert!(v.union_retention(0) < 0.6);

    for rule in [RetentionRule::Union, RetentionRule::PerObject] {
        let cfg = PreprocessConfig { retention_rule: rule, ..PreprocessConfig::default() };
        let pairs = preprocess_scene(&src, &vocab, &cfg).unwrap();
        assert!(pairs.iter().all(|p| p.crop_x != 0), "{rule:?}");
        for p in &pairs {
            v.check(p);
        }
    }
}

#[test]
fn fewer_than_four_objects_emit_nothing() {
    let vocab = ClassVocabulary::default();
    let three: Vec<FixtureObject> = left_furnished_view().into_iter().take(3).collect();
    assert!(preprocess_scene(&scene(&three), &vocab, &PreprocessConfig::default()).unwrap().is_empty());
}

#[test]
fn centred_furniture_yields_two_distinct_square_crops() {
    let vocab = ClassVocabulary::default();
    // Resized columns ~[210, 250]: inside every crop window.
    let objs: Vec<FixtureObject> =
        (0..4).map(|i| FixtureObject::new([4, 6, 11, 35][i], i as u16 + 1, 600, 100 + 140 * i as u32, 700, 200 + 140 * i as u32)).collect();
    let src = scene(&objs);
    let start = Instant::now();
    let pairs = preprocess_scene(&src, &vocab, &PreprocessConfig::default()).unwrap();
    let again = preprocess_scene(&src, &vocab, &PreprocessConfig::default()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(pairs, again);
    assert_eq!(pairs.iter().map(|p| p.crop_x).collect::<Vec<_>>(), vec![0, 200]);
    let v = Validator::new(&src, &vocab);
    for p in &pairs {
        v.check(p);
        assert_eq!(p.objects.len(), 4);
    }
    // The right crop sees the same objects 200 columns further left.
    let shift = |p: &ScenePair| p.objects.iter().map(|o| o.bbox.x0).collect::<Vec<_>>();
    let left = shift(&pairs[0]);
    let right = shift(&pairs[1]);
    assert!(left.iter().zip(&right).all(|(a, b)| a - b == 200));
}

#[test]
fn misaligned_masks_are_rejected() {
    let vocab = ClassVocabulary::default();
    let mut src = scene(&left_furnished_view());
    src.semantic = LabelMap::new(640, 360, vec![1; 640 * 360]).unwrap();
    assert!(matches!(preprocess_scene(&src, &vocab, &PreprocessConfig::default()), Err(Error::Alignment(_))));
}

fn fixture_tree(root: &Path) {
    for id in [1, 2, 3000, 3001, 4000] {
        write_structured3d_scene(root, id, 10 + id, RoomType::Bedroom, (128, 72), &[vec![]]).unwrap();
    }
}

#[test]
fn manifest_splits_at_scene_3000() {
    let dir = tempfile::tempdir().unwrap();
    fixture_tree(dir.path());
    let m = make_manifest(dir.path(), RoomType::Bedroom, SplitSelector::All).unwrap();
    let ids = |s: Split| m.records.iter().filter(|r| r.split == s).map(|r| r.scene_id).collect::<Vec<_>>();
    assert_eq!(ids(Split::Train), vec![1, 2]);
    assert_eq!(ids(Split::Test), vec![3000, 3001, 4000]);
    let train = make_manifest(dir.path(), RoomType::Bedroom, SplitSelector::Train).unwrap();
    assert_eq!(train.count(Split::Train), 2);
    assert_eq!(train.count(Split::Test), 0);

    let again = make_manifest(dir.path(), RoomType::Bedroom, SplitSelector::All).unwrap();
    assert_eq!(m.to_json().unwrap().into_bytes(), again.to_json().unwrap().into_bytes());

    let living = make_manifest(dir.path(), RoomType::LivingRoom, SplitSelector::All).unwrap();
    assert!(living.records.is_empty());
}

#[test]
fn manifest_lists_every_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    fixture_tree(dir.path());
    let gone = dir.path().join("scene_00002/2D_rendering/12/perspective/full/0/semantic.png");
    std::fs::remove_file(&gone).unwrap();
    std::fs::remove_file(dir.path().join("scene_03001/annotation_3d.json")).unwrap();
    match make_manifest(dir.path(), RoomType::Bedroom, SplitSelector::All) {
        Err(Error::MissingPaths(paths)) => {
            assert_eq!(paths.len(), 2);
            assert!(paths.contains(&gone));
        }
        other => panic!("expected missing paths, got {other:?}"),
    }
}

#[test]
fn crops_round_trip_through_the_manifest() {
    let vocab = ClassVocabulary::default();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("s3d");
    write_structured3d_scene(&root, 5, 1, RoomType::Bedroom, SRC, &[left_furnished_view()]).unwrap();
    let m = make_manifest(&root, RoomType::Bedroom, SplitSelector::All).unwrap();
    let src = m.load_source(&m.records[0]).unwrap();
    let pairs = preprocess_scene(&src, &vocab, &PreprocessConfig::default()).unwrap();
    let out = dir.path().join("out");
    let records: Vec<_> = pairs.iter().map(|p| write_crop(&out, &root, &m.records[0], p).unwrap()).collect();
    let manifest = out.join("crops.jsonl");
    write_crop_manifest(&manifest, &records).unwrap();
    assert_eq!(read_crop_manifest(&manifest).unwrap(), records);

    let data = PairDataset::load(&manifest, Some(Split::Train), 256).unwrap();
    assert_eq!(data.len(), pairs.len());
    assert_eq!(data.image(0), &pairs[0].decorated);
    let small = PairDataset::load(&manifest, None, 64).unwrap();
    assert_eq!(small.image_size(), 64);
    assert!(PairDataset::load(&manifest, Some(Split::Test), 64).unwrap().is_empty());
}
