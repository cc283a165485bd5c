mod common;

use declip::data::{
    build_vocab, decode_ppm, encode_ppm, filter_caption, load_samples, make_batches, read_lexicon, split_words,
    synth_generate, tokenize, CaptionRules, DropReason, FilterDecision, ManifestRecord, SynthSpec, Vocab, EOS, PAD,
};
use std::collections::{HashMap, HashSet};

fn english(words: &[&str]) -> HashSet<String> {
    words.iter().map(|s| s.to_string()).collect()
}

#[test]
fn caption_filter_rules() {
    let en = english(&["a", "red", "cube", "the", "big", "dog", "runs", "fast", "and", "far"]);
    let tags: HashMap<String, String> = [("a", "det"), ("red", "adj"), ("cube", "noun"), ("dog", "noun"), ("big", "adj")]
        .iter()
        .map(|(w, t)| (w.to_string(), t.to_string()))
        .collect();
    assert_eq!(filter_caption("", &en, &tags), FilterDecision::Drop(DropReason::NoCaption));
    assert_eq!(filter_caption(" ,.; ", &en, &tags), FilterDecision::Drop(DropReason::NoCaption));
    let seven_of_ten = "a red cube the big dog runs zzz qqq www";
    assert_eq!(filter_caption(seven_of_ten, &en, &tags), FilterDecision::Drop(DropReason::EnglishRatio));
    let eight_of_ten = "a red cube the big dog runs fast qqq www";
    assert_eq!(filter_caption(eight_of_ten, &en, &tags), FilterDecision::Keep);
    assert_eq!(filter_caption("a red cube", &en, &tags), FilterDecision::Keep);
    assert_eq!(filter_caption("cube dog", &en, &tags), FilterDecision::Drop(DropReason::SinglePos));
}

#[test]
fn vocab_order_and_tokenize() {
    let v = build_vocab(["b a c", "a b", "a, D!"], 1);
    assert_eq!(v.word(3), Some("a"));
    assert_eq!(v.word(4), Some("b"));
    assert_eq!(v.word(5), Some("c"));
    assert_eq!(v.word(6), Some("d"));
    assert_eq!(build_vocab(["b a c", "a b"], 2).len(), 5);
    assert_eq!(tokenize("A zebra, C", &v, 5), vec![3, 5, EOS, PAD, PAD]);
    assert_eq!(tokenize("a b c d", &v, 3), vec![3, 4, EOS]);
    assert_eq!(v.decode(&tokenize("C, a!", &v, 6)), "c a");
    let json = serde_json::to_string(&v).unwrap();
    assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
}

#[test]
fn ppm_round_trip() {
    let spec = SynthSpec {
        pairs_per_concept: 1,
        eval_per_concept: 0,
        ..SynthSpec::default()
    };
    let d = synth_generate(&spec).unwrap();
    let img = &d.train[0].image;
    let back = decode_ppm(&encode_ppm(img).unwrap()).unwrap();
    assert_eq!(&back, img);
    assert!(decode_ppm(b"P6\n4 4\n255\n\x00").is_err());
}

#[test]
fn synthetic_corpus_contract() {
    let spec = SynthSpec::default();
    let d = synth_generate(&spec).unwrap();
    assert_eq!(d.train.len(), 2000);
    let mut per = [0usize; 8];
    for s in &d.train {
        per[s.label.unwrap()] += 1;
    }
    assert!(per.iter().all(|&c| c == 250));
    let (en, tags) = (d.english(), d.tag_map());
    for s in d.train.iter().chain(&d.eval) {
        assert_eq!(filter_caption(&s.caption, &en, &tags), FilterDecision::Keep, "{}", s.caption);
    }
    let captions: HashSet<&str> = d.train.iter().map(|s| s.caption.as_str()).collect();
    assert_eq!(captions.len(), 8 * 4);
    for (w, syns) in &d.lexicon {
        for s in syns {
            assert!(d.lexicon[s].contains(w));
        }
    }
}

#[test]
fn synthetic_files_are_reproducible_and_loadable() {
    let spec = SynthSpec {
        pairs_per_concept: 5,
        eval_per_concept: 2,
        seed: 3,
        ..SynthSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let d = synth_generate(&spec).unwrap();
    d.write(a.path()).unwrap();
    synth_generate(&spec).unwrap().write(b.path()).unwrap();
    for f in ["train.jsonl", "eval.jsonl", "lexicon.tsv", "images/train_00007.ppm"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let rules = CaptionRules {
        english: Some(d.english()),
        tags: d.tag_map(),
    };
    let (samples, report) = load_samples(&a.path().join("train.jsonl"), 32, 3, &rules).unwrap();
    assert_eq!(samples, d.train);
    assert_eq!(report.kept, 40);
    assert_eq!(read_lexicon(&a.path().join("lexicon.tsv")).unwrap(), d.lexicon);
}

#[test]
fn damaged_and_inline_records() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.ppm"), b"P6\n32 32\n255\n\x01\x02").unwrap();
    let good = vec![vec![vec![0.5f32; 2]; 2]; 3];
    let recs = vec![
        ManifestRecord { image_path: Some("bad.ppm".into()), pixels: None, caption: "a red box".into(), label: None },
        ManifestRecord { image_path: Some("missing.ppm".into()), pixels: None, caption: "a box".into(), label: None },
        ManifestRecord { image_path: None, pixels: Some(good.clone()), caption: "".into(), label: None },
        ManifestRecord { image_path: None, pixels: Some(good), caption: "a red box".into(), label: Some(1) },
    ];
    let path = dir.path().join("m.jsonl");
    declip::data::write_manifest(&path, &recs).unwrap();
    let (samples, report) = load_samples(&path, 2, 3, &CaptionRules::default()).unwrap();
    assert_eq!(samples.len(), 1);
    assert_eq!(samples[0].label, Some(1));
    assert_eq!(report.dropped[&DropReason::DamagedImage], 2);
    assert_eq!(report.dropped[&DropReason::NoCaption], 1);
}

#[test]
fn batches_are_epoch_seeded_and_drop_partial() {
    let a = make_batches(10, 3, 0, 1);
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|b| b.len() == 3));
    assert_eq!(a, make_batches(10, 3, 0, 1));
    assert_ne!(a, make_batches(10, 3, 1, 1));
    let mut all: Vec<usize> = a.concat();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 9);
}

#[test]
fn detokenize_round_trips_known_text() {
    let d = synth_generate(&SynthSpec { pairs_per_concept: 3, ..SynthSpec::default() }).unwrap();
    let v = build_vocab(d.train.iter().map(|s| s.caption.as_str()), 1);
    for s in &d.train {
        let ids = tokenize(&s.caption, &v, 16);
        assert_eq!(v.decode(&ids), split_words(&s.caption).join(" "));
    }
}
