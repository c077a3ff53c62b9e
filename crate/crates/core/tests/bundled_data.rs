use std::path::PathBuf;

use trimod::data::{corpus_stats, load_visual_features, parse_corpus};
use trimod::labels::EntityType;
use trimod::synthetic::{bundled_files, MEMORIZATION_POSTS};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

#[test]
fn shipped_files_match_the_generator() {
    for (name, text) in bundled_files().unwrap() {
        let on_disk = std::fs::read_to_string(data_dir().join(name))
            .unwrap_or_else(|e| panic!("{name}: {e}; run `cargo run -p trimod --example make_corpora`"));
        assert!(on_disk == text, "{name} is stale; run `cargo run -p trimod --example make_corpora`");
    }
}

#[test]
fn memorization_corpus_parses_with_images_and_hashtags() {
    let posts = parse_corpus(data_dir().join("memorization.conll")).unwrap();
    assert_eq!(posts.len(), MEMORIZATION_POSTS);
    let visual = load_visual_features(data_dir().join("memorization.visual")).unwrap();
    assert!(posts.iter().all(|p| p.image_id.as_deref().is_some_and(|id| visual.contains(id))));
    assert!(posts.iter().any(|p| !p.hashtags.is_empty()));
    let stats = corpus_stats(&posts);
    assert!(EntityType::ALL.iter().all(|k| stats.count(*k) > 0));
}

#[test]
fn multimodal_visual_file_covers_both_splits() {
    let visual = load_visual_features(data_dir().join("multimodal.visual")).unwrap();
    for split in ["multimodal_train.conll", "multimodal_dev.conll"] {
        let posts = parse_corpus(data_dir().join(split)).unwrap();
        assert!(posts.iter().all(|p| visual.contains(p.image_id.as_deref().unwrap())));
    }
}
