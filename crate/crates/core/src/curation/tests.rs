use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;

fn rec(id: &str, domain: Domain, words: &[&str]) -> ManifestRecord {
    ManifestRecord {
        id: id.to_string(),
        path: format!("{id}.gif"),
        frame_count: 8,
        width: 32,
        height: 32,
        domain,
        caption: "a b".to_string(),
        trigger_words: words.iter().map(|w| w.to_string()).collect(),
        ocr_text: Some(String::new()),
        split: Split::Unassigned,
    }
}

#[test]
fn entropy_cases() {
    let constant = vec![77u8; 1024];
    let d = entropy_filter(&constant, 3.0);
    assert_eq!(d.score, 0.0);
    assert!(!d.keep);
    let two: Vec<u8> = (0..1024).map(|i| if i % 2 == 0 { 10 } else { 200 }).collect();
    assert_eq!(entropy_bits(&two), 1.0);
    let all: Vec<u8> = (0..1024).map(|i| (i % 256) as u8).collect();
    let d = entropy_filter(&all, 3.0);
    assert_eq!(d.score, 8.0);
    assert!(d.keep);
    assert_eq!(entropy_bits(&[]), 0.0);
}

#[test]
fn grayscale_weights() {
    assert_eq!(grayscale(&[255, 255, 255, 0, 0, 0, 255, 0, 0]), vec![255, 0, 76]);
}

#[test]
fn aspect_cases() {
    assert!(aspect_filter(256, 256, 2.0).keep);
    assert!(!aspect_filter(1000, 100, 2.0).keep);
    assert!(aspect_filter(512, 256, 2.0).keep);
    assert!(aspect_filter(256, 512, 2.0).keep);
    assert!(!aspect_filter(513, 256, 2.0).keep);
    assert!(!aspect_filter(0, 5, 2.0).keep);
}

#[test]
fn ocr_cases() {
    let mut r = rec("a", Domain::Real, &[]);
    assert_eq!(ocr_length_filter(&r, 30), OcrDecision::Keep { chars: 0 });
    r.ocr_text = Some("x".repeat(31));
    assert!(!ocr_length_filter(&r, 30).keep());
    r.ocr_text = Some("é".repeat(30));
    assert!(ocr_length_filter(&r, 30).keep());
    r.ocr_text = None;
    assert_eq!(ocr_length_filter(&r, 30), OcrDecision::Missing);
    assert!(ocr_length_filter(&r, 30).keep());
}

#[test]
fn flip_pad_sequences() {
    let seq = |n: usize| flip_pad(&(1..=n).collect::<Vec<_>>(), 8).unwrap();
    assert_eq!(seq(1), vec![1; 8]);
    assert_eq!(seq(2), vec![1, 2, 1, 2, 1, 2, 1, 2]);
    assert_eq!(seq(5), vec![1, 2, 3, 4, 5, 4, 3, 2]);
    assert_eq!(seq(8), (1..=8).collect::<Vec<_>>());
    assert_eq!(seq(12), (1..=8).collect::<Vec<_>>());
    assert_eq!(flip_pad(&[1, 2, 3], 12).unwrap(), vec![1, 2, 3, 2, 1, 2, 3, 2, 1, 2, 3, 2]);
    assert!(flip_pad::<u8>(&[], 8).is_err());
}

proptest! {
    #[test]
    fn flip_pad_length_and_no_stutter(n in 1usize..20, target in 0usize..40) {
        let frames: Vec<usize> = (0..n).collect();
        let out = flip_pad(&frames, target).unwrap();
        prop_assert_eq!(out.len(), target);
        if n >= 2 {
            prop_assert!(out.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn filter_order_does_not_matter(
        specs in proptest::collection::vec((1usize..400, 1usize..400, proptest::option::of(0usize..60), 0u8..4), 1..30),
        perm in Just(RULES).prop_shuffle(),
    ) {
        let cfg = FilterConfig::default();
        let records: Vec<ManifestRecord> = specs
            .iter()
            .enumerate()
            .map(|(i, &(w, h, ocr, _))| {
                let mut r = rec(&format!("{i:03}"), Domain::Real, &[]);
                r.width = w;
                r.height = h;
                r.ocr_text = ocr.map(|n| "o".repeat(n));
                r
            })
            .collect();
        let frame = |r: &ManifestRecord| -> FirstFrame {
            let i: usize = r.id.parse().unwrap();
            match specs[i].3 {
                0 => Err("corrupt".to_string()),
                1 => Ok(vec![3; 64]),
                _ => Ok((0..64).map(|j| (j * 4) as u8).collect()),
            }
        };
        let (kept, report) = apply_filters(&records, frame, &cfg);
        prop_assert_eq!(report.kept + report.dropped, report.input);
        let mut seq = records.clone();
        for rule in perm {
            seq.retain(|r| passes(rule, r, &frame(r), &cfg));
        }
        prop_assert_eq!(seq, kept);
    }
}

#[test]
fn report_counts_and_notes() {
    let mut a = rec("a", Domain::Real, &[]);
    a.width = 100;
    a.height = 10;
    let mut b = rec("b", Domain::Real, &[]);
    b.ocr_text = None;
    let c = rec("c", Domain::Cartoon, &[]);
    let frames = |r: &ManifestRecord| -> FirstFrame {
        if r.id == "c" {
            Err("bad gif".into())
        } else {
            Ok((0..=255).collect())
        }
    };
    let (kept, report) = apply_filters(&[a, b, c], frames, &FilterConfig::default());
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].id, "b");
    assert_eq!((report.dropped_aspect, report.dropped_entropy, report.undecodable, report.missing_ocr), (1, 1, 1, 1));
    assert_eq!(report.decisions[2].entropy, None);
    assert!(report.decisions[1].notes[0].contains("ocr"));
}

fn synthetic_manifest(n: usize) -> Vec<ManifestRecord> {
    let words = ["bear", "cat", "dog", "fox", "owl", "bee", "cow"];
    (0..n)
        .map(|i| {
            let d = if i % 3 == 0 { Domain::Real } else { Domain::Cartoon };
            let w = [words[(i * i) % 7], words[(i / 3) % 7]];
            rec(&format!("r{:05}", (i * 7919) % n), d, &w)
        })
        .collect()
}

#[test]
fn split_picks_first_record_of_top_word() {
    let records = vec![
        rec("c3", Domain::Cartoon, &["bear"]),
        rec("c1", Domain::Cartoon, &["cat"]),
        rec("c2", Domain::Cartoon, &["bear", "cat"]),
        rec("c4", Domain::Cartoon, &["bear"]),
        rec("r1", Domain::Real, &["bear"]),
    ];
    let out = split_dataset(&records, 1);
    let test_c: Vec<&str> = out.records.iter().filter(|r| r.split == Split::TestC).map(|r| r.id.as_str()).collect();
    assert_eq!(test_c, vec!["c2"]);
    assert_eq!(out.test_words[&Domain::Cartoon], vec!["bear".to_string()]);
    assert_eq!(out.records.iter().filter(|r| r.split == Split::TestR).count(), 1);
    let out = split_dataset(&records, 5);
    assert_eq!(out.warnings.len(), 2);
    for r in &out.records {
        r.validate().unwrap();
    }
}

#[test]
fn split_on_large_manifest_is_deterministic_and_disjoint() {
    let records = synthetic_manifest(1000);
    let a = split_dataset(&records, 3);
    assert_eq!(a, split_dataset(&records, 3));
    let train: BTreeSet<&str> = a.records.iter().filter(|r| r.split == Split::Train).map(|r| r.id.as_str()).collect();
    let test: BTreeSet<&str> = a.records.iter().filter(|r| r.split != Split::Train).map(|r| r.id.as_str()).collect();
    assert_eq!(test.len(), 6);
    assert!(train.is_disjoint(&test));
    assert_eq!(train.len() + test.len(), 1000);
}

#[test]
fn stats_match_hand_computed_values() {
    let mut rs: Vec<ManifestRecord> = [1, 4, 10]
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let mut r = rec(&i.to_string(), Domain::Cartoon, &["x"]);
            r.frame_count = f;
            r
        })
        .collect();
    let s = manifest_stats(&rs);
    assert_eq!(s.multi_frame_ratio, 2.0 / 3.0);
    assert_eq!(s.avg_frames_multi, 7.0);
    assert_eq!(s.cartoon_ratio, 1.0);
    rs.truncate(2);
    rs[0].caption = "a b".into();
    rs[1].caption = "a b c d".into();
    rs[1].domain = Domain::Real;
    rs[1].ocr_text = Some("SALE".into());
    let s = manifest_stats(&rs);
    assert_eq!(s.avg_description_length, 3.0);
    assert_eq!(s.cartoon_ratio, 0.5);
    assert_eq!(s.ocr_ratio, 0.5);
    assert_eq!(s.caption_word_freq["a"], 2);
    assert_eq!(s.trigger_word_freq[&Domain::Real]["x"], 1);
    assert_eq!(manifest_stats(&[]), ManifestStats::default());
}

#[test]
fn record_json_field_names() {
    let mut r = rec("id1", Domain::Cartoon, &["bear"]);
    r.split = Split::TestC;
    let v = serde_json::to_value(&r).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        vec!["caption", "domain", "frame_count", "height", "id", "ocr_text", "path", "split", "trigger_words", "width"]
    );
    assert_eq!(v["split"], "test-c");
    assert_eq!(v["domain"], "cartoon");
    let back: ManifestRecord = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
    let bare = r#"{"id":"x","path":"p","frame_count":3,"width":4,"height":4,"domain":"real","caption":"c"}"#;
    let r: ManifestRecord = serde_json::from_str(bare).unwrap();
    assert_eq!((r.ocr_text, r.split), (None, Split::Unassigned));
}
