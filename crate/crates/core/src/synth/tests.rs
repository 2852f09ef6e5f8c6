use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::*;
use crate::curation::{apply_filters, grayscale, FilterConfig};

fn spec(motion: Motion) -> SceneSpec {
    SceneSpec {
        shape: Shape::Square,
        color: Color::Red,
        motion,
        background: Color::Cyan,
        domain: Domain::Cartoon,
        radius: 5,
        start: (6, 16),
        velocity: (2, 0),
    }
}

fn centroid_x(mask: &[bool]) -> f64 {
    let (mut sum, mut n) = (0.0, 0.0);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            sum += (i % SIZE) as f64;
            n += 1.0;
        }
    }
    sum / n
}

#[test]
fn translate_moves_centroid_by_velocity() {
    let s = spec(Motion::Translate);
    let xs: Vec<f64> = (0..FRAMES).map(|t| centroid_x(&render_mask(&s, t))).collect();
    for w in xs.windows(2) {
        assert!((w[1] - w[0] - 2.0).abs() < 1e-12, "{xs:?}");
    }
}

#[test]
fn blink_repeats_at_stride_two() {
    let (clip, caption) = gen_clip(&spec(Motion::Blink), 3).unwrap();
    for t in 0..FRAMES - 2 {
        assert_eq!(clip.frame(t), clip.frame(t + 2));
        assert_ne!(clip.frame(t), clip.frame(t + 1));
    }
    assert_eq!(caption, "cartoon\ta red square blinking on and off");
}

#[test]
fn generation_is_deterministic() {
    let s = SceneSpec { domain: Domain::Real, ..spec(Motion::Wave) };
    assert_eq!(gen_clip(&s, 9).unwrap(), gen_clip(&s, 9).unwrap());
    assert_ne!(gen_clip(&s, 9).unwrap().0, gen_clip(&s, 10).unwrap().0);
}

#[test]
fn invalid_specs() {
    let mut s = spec(Motion::Translate);
    s.radius = 17;
    assert!(gen_clip(&s, 0).is_err());
    let mut s = spec(Motion::Translate);
    s.velocity = (4, 0);
    assert!(gen_clip(&s, 0).is_err());
    let mut s = spec(Motion::Bounce);
    s.background = s.color;
    assert!(gen_clip(&s, 0).is_err());
}

#[test]
fn dataset_properties() {
    let items = gen_dataset(200, 5).unwrap();
    assert_eq!(items.len(), 200);
    let cartoon = items.iter().filter(|i| i.spec.domain == Domain::Cartoon).count();
    assert_eq!(cartoon, 100);
    for m in MOTIONS {
        assert_eq!(items.iter().filter(|i| i.spec.motion == m).count(), 40);
    }
    let ids: BTreeSet<&str> = items.iter().map(|i| i.record.id.as_str()).collect();
    assert_eq!(ids.len(), 200);
    for item in &items {
        item.spec.validate().unwrap();
        let clip = &item.clip;
        // consecutive frames always differ
        for t in 0..FRAMES - 1 {
            assert_ne!(clip.frame(t), clip.frame(t + 1), "{}", item.record.id);
        }
        // at most 256 colors per frame
        let rgb = clip.to_u8();
        for f in rgb.chunks(SIZE * SIZE * 3) {
            let colors: BTreeSet<&[u8]> = f.chunks(3).collect();
            assert!(colors.len() <= 256);
        }
        let (color, shape, motion) = parse_description(&item.record.caption).unwrap();
        assert_eq!((color, shape, motion), (item.spec.color, item.spec.shape, item.spec.motion));
        assert!(item.caption.starts_with(item.spec.domain.as_str()));
    }
    let records: Vec<_> = items.iter().map(|i| i.record.clone()).collect();
    let (kept, report) = apply_filters(
        &records,
        |r| {
            let i = items.iter().position(|x| x.record.id == r.id).unwrap();
            Ok(grayscale(&items[i].clip.to_u8()[..SIZE * SIZE * 3]))
        },
        &FilterConfig::default(),
    );
    assert_eq!(kept.len(), 200, "{:?}", report.decisions.iter().filter(|d| !d.kept).collect::<Vec<_>>());
}

#[test]
fn dataset_prefix_is_stable() {
    let a = gen_dataset(30, 8).unwrap();
    let b = gen_dataset(12, 8).unwrap();
    assert_eq!(&a[..12], &b[..]);
    assert!(gen_dataset(0, 1).is_err());
}
