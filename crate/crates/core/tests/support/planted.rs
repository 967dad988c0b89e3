//! 500 raw records with known violations, and the (image, text) pairs a
//! correct cleaner keeps.

use std::collections::{BTreeMap, BTreeSet};

use xmodal_core::pipeline::{CandidateText, ContentFlag, DropReason, RawRecord, TextSource};
use xmodal_core::rng::Rng;

pub const ANIMALS: [&str; 8] = ["cat", "dog", "bird", "horse", "sheep", "car", "boat", "kite"];
const PLACES: [&str; 4] = ["grass", "water", "street", "park"];

pub struct Planted {
    pub records: Vec<RawRecord>,
    pub kept: BTreeSet<(String, String)>,
    /// Expected drop counts per stage.
    pub drops: BTreeMap<(&'static str, DropReason), usize>,
}

fn good_caption(a: &str, b: &str, place: &str) -> String {
    format!("a {a} and a {b} sitting together on the {place} near the water")
}

type Maker<'a> = dyn FnMut(&mut Rng, usize) -> (RawRecord, Option<String>) + 'a;

pub fn planted() -> Planted {
    let mut rng = Rng::new(2024);
    let mut records = Vec::new();
    let mut kept = BTreeSet::new();
    let mut drops: BTreeMap<(&'static str, DropReason), usize> = BTreeMap::new();
    let next = std::cell::Cell::new(0usize);
    let new_record = |rng: &mut Rng, texts: Vec<(TextSource, String)>, tags: &[&str]| {
        next.set(next.get() + 1);
        let next = next.get();
        RawRecord {
            image_id: format!("img-{next:04}"),
            page_lang: "en".into(),
            is_dominant: true,
            width: (301 + rng.below(700)) as f64,
            height: (301 + rng.below(700)) as f64,
            content_flags: BTreeSet::new(),
            candidate_texts: texts
                .into_iter()
                .map(|(source, text)| CandidateText { source, text })
                .collect(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    };
    let pick2 = |rng: &mut Rng| {
        let i = rng.below(ANIMALS.len());
        let j = (i + 1 + rng.below(ANIMALS.len() - 1)) % ANIMALS.len();
        (ANIMALS[i], ANIMALS[j])
    };
    let mut add = |rng: &mut Rng, n: usize, f: &mut Maker| {
        for i in 0..n {
            let (r, keep) = f(rng, i);
            if let Some(t) = keep {
                kept.insert((r.image_id.clone(), t));
            }
            records.push(r);
        }
    };
    // Clean records, each with a distinct caption.
    add(&mut rng, 255, &mut |rng, i| {
        let (a, b) = pick2(rng);
        let c = format!(
            "{} {}",
            good_caption(a, b, PLACES[i % 4]),
            ["", "today", "at night", "on a sunny day"][i / 4 % 4]
        )
        .trim()
        .to_string()
            + &" .".repeat(i / 16);
        let r = new_record(rng, vec![(TextSource::Alt, c.clone())], &[a, b]);
        (r, Some(c))
    });
    let mut rejected = Vec::new();
    let bad_image = |rng: &mut Rng,
                     drops: &mut BTreeMap<(&'static str, DropReason), usize>,
                     n: usize,
                     reason: DropReason,
                     edit: fn(&mut RawRecord, usize)| {
        let mut out = Vec::new();
        for i in 0..n {
            let (a, b) = pick2(rng);
            let mut r = new_record(rng, vec![(TextSource::Alt, good_caption(a, b, "park"))], &[a, b]);
            edit(&mut r, i);
            out.push(r);
        }
        *drops.entry(("image", reason)).or_default() += n;
        out
    };
    rejected.extend(bad_image(&mut rng, &mut drops, 20, DropReason::Size, |r, i| {
        if i % 2 == 0 {
            r.width = 300.0
        } else {
            r.height = 300.0
        }
    }));
    rejected.extend(bad_image(&mut rng, &mut drops, 5, DropReason::Size, |r, _| {
        r.width = 120.0
    }));
    rejected.extend(bad_image(&mut rng, &mut drops, 15, DropReason::Content, |r, i| {
        r.content_flags
            .insert([ContentFlag::Pornographic, ContentFlag::Racy, ContentFlag::Unnatural][i % 3]);
    }));
    rejected.extend(bad_image(&mut rng, &mut drops, 10, DropReason::Language, |r, i| {
        r.page_lang = ["de", "fr"][i % 2].into()
    }));
    rejected.extend(bad_image(&mut rng, &mut drops, 10, DropReason::NotDominant, |r, _| {
        r.is_dominant = false
    }));
    // Images just above the size limit stay.
    add(&mut rng, 10, &mut |rng, i| {
        let (a, b) = pick2(rng);
        let c = good_caption(a, b, PLACES[i % 4]) + " by the boat";
        let mut r = new_record(rng, vec![(TextSource::Title, c.clone())], &[a, b]);
        r.width = 301.0;
        r.height = 301.0 + i as f64;
        (r, Some(c))
    });
    // Out-of-vocabulary captions: 3 of 10 words unknown.
    add(&mut rng, 30, &mut |rng, _| {
        let (a, b) = pick2(rng);
        let r = new_record(
            rng,
            vec![(TextSource::Alt, format!("a {a} and a {b} qzxv on the wvxq zzyq"))],
            &[a, b],
        );
        (r, None)
    });
    *drops.entry(("text", DropReason::Oov)).or_default() += 30;
    // Too short, too long, and empty after removing bad spans.
    add(&mut rng, 30, &mut |rng, i| {
        let (a, b) = pick2(rng);
        let text = match i % 3 {
            0 => format!("{a} {b}"),
            1 => vec![a; 31].join(" "),
            _ => "http://example.com/photo.jpg img".to_string(),
        };
        (new_record(rng, vec![(TextSource::Alt, text)], &[a, b]), None)
    });
    *drops.entry(("text", DropReason::Length)).or_default() += 20;
    *drops.entry(("text", DropReason::Empty)).or_default() += 10;
    // Irrelevant captions: none of the tags is mentioned.
    add(&mut rng, 30, &mut |rng, i| {
        let r = new_record(
            rng,
            vec![(TextSource::Surrounding, good_caption("cat", "dog", PLACES[i % 4]))],
            &["horse", "sheep"],
        );
        (r, None)
    });
    *drops.entry(("score", DropReason::LowScore)).or_default() += 30;
    // Bad spans around a good caption are cut; the rest is kept.
    add(&mut rng, 20, &mut |rng, i| {
        let (a, b) = pick2(rng);
        let c = format!(
            "{} number {}",
            good_caption(a, b, PLACES[i % 4]),
            ["one", "two", "three", "four", "several"][i % 5]
        );
        let noisy = format!("{c} see www.example.org/p?{i} DSC {i}.jpg ©");
        let expect = format!("{c} see");
        let r = new_record(rng, vec![(TextSource::Alt, noisy)], &[a, b]);
        (r, Some(expect))
    });
    // Several candidates: the best one wins; a worse one is dropped.
    add(&mut rng, 40, &mut |rng, i| {
        let (a, b) = pick2(rng);
        let best = format!(
            "{} with {} birds",
            good_caption(a, b, PLACES[i % 4]),
            ["two", "three", "four", "many", "several"][i % 5]
        ) + &" !".repeat(i / 20);
        let weak = format!("a photo of a {a} in the {}", PLACES[i % 4]);
        let r = new_record(
            rng,
            vec![(TextSource::Alt, weak), (TextSource::Title, best.clone())],
            &[a, b],
        );
        (r, Some(best))
    });
    *drops.entry(("aggregate", DropReason::NotBest)).or_default() += 40;
    // Over-duplicated boilerplate: 12 images share one caption, all removed.
    add(&mut rng, 12, &mut |rng, _| {
        (
            new_record(
                rng,
                vec![(
                    TextSource::Alt,
                    "a cat and a dog playing in the park on a sunny day".into(),
                )],
                &["cat", "dog"],
            ),
            None,
        )
    });
    *drops.entry(("aggregate", DropReason::OverDuplicated)).or_default() += 12;
    // Exactly at the duplicate limit: 10 images share a caption, all kept.
    add(&mut rng, 10, &mut |rng, _| {
        let c = "a horse and a sheep standing on the grass near the water".to_string();
        (
            new_record(rng, vec![(TextSource::Alt, c.clone())], &["horse", "sheep"]),
            Some(c),
        )
    });
    // Same caption with different case and spacing counts as one text.
    add(&mut rng, 3, &mut |rng, i| {
        let c = [
            "A Bird  and a kite over the water in the sky",
            "a bird and a kite over the water in the sky",
            "a bird and A KITE over the water in the sky",
        ][i];
        (
            new_record(rng, vec![(TextSource::Alt, c.into())], &["bird", "kite"]),
            Some(c.split_whitespace().collect::<Vec<_>>().join(" ")),
        )
    });
    records.extend(rejected);
    assert_eq!(records.len(), 500);
    rng.shuffle(&mut records);
    Planted { records, kept, drops }
}
