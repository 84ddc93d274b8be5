//! Replays the checked-in fuzz corpus through the same entry points and
//! round-trip checks as the fuzz targets, so the seeds stay meaningful on a
//! stable toolchain. Seeds named `bad_*` must be rejected; all others must
//! parse.

use std::path::{Path, PathBuf};

use intent_core::annotation::{fleiss_kappa, format_ratings_csv, parse_ratings_csv, ratings_to_matrix};
use intent_core::config::ExperimentConfig;
use intent_core::data::{decode_image, Manifest};
use intent_core::evaluation::{ClassScores, DisruptionStudy};
use intent_core::hashtags::{
    format_hashtag_file, format_vector_lines, parse_hashtag_file, parse_vector_lines, word_break_str, EmbeddingTable,
    HashtagFeature, SegDictionary,
};
use intent_core::masks::{decode_mask_png, RegionRecord};
use intent_core::model::{decode_checkpoint, encode_checkpoint};
use intent_core::saliency::AssociationTable;
use intent_core::taxonomy::{GroupTable, Taxonomy};

fn seeds(target: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn expect_ok(path: &Path) -> bool {
    !path.file_name().unwrap().to_str().unwrap().starts_with("bad_")
}

/// Runs `check` on every seed; it returns whether the input was accepted.
fn replay(target: &str, check: impl Fn(&[u8]) -> bool) {
    for path in seeds(target) {
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(check(&bytes), expect_ok(&path), "{}", path.display());
    }
}

fn text(data: &[u8]) -> &str {
    std::str::from_utf8(data).expect("text seeds are UTF-8")
}

macro_rules! json_round_trip {
    ($name:ident, $target:literal, $ty:ty) => {
        #[test]
        fn $name() {
            replay($target, |data| match <$ty>::from_json_str(text(data)) {
                Ok(v) => {
                    let enc = v.to_json_string();
                    assert_eq!(<$ty>::from_json_str(&enc).unwrap().to_json_string(), enc);
                    true
                }
                Err(_) => false,
            });
        }
    };
}

json_round_trip!(manifest_seeds, "manifest", Manifest);
json_round_trip!(study_seeds, "study_json", DisruptionStudy);
json_round_trip!(class_scores_seeds, "class_scores_json", ClassScores);
json_round_trip!(group_table_seeds, "group_table_json", GroupTable);
json_round_trip!(hashtag_feature_seeds, "hashtag_feature", HashtagFeature);
json_round_trip!(taxonomy_seeds, "taxonomy_json", Taxonomy);
json_round_trip!(association_table_seeds, "association_table", AssociationTable);

#[test]
fn ratings_csv_seeds() {
    replay("ratings_csv", |data| {
        let Ok(rows) = parse_ratings_csv(text(data)) else { return false };
        let enc = format_ratings_csv(&rows);
        assert_eq!(format_ratings_csv(&parse_ratings_csv(&enc).unwrap()), enc);
        let (m, _, _) = ratings_to_matrix(&rows).unwrap();
        assert!(fleiss_kappa(&m).unwrap().kappa <= 1.0);
        true
    });
}

#[test]
fn config_seeds() {
    replay("config_toml", |data| {
        let Ok(cfg) = ExperimentConfig::from_toml_str(text(data)) else { return false };
        cfg.validate().unwrap();
        let enc = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&enc).unwrap(), cfg);
        true
    });
}

#[test]
fn hashtag_file_seeds() {
    replay("hashtag_file", |data| {
        let Ok(rows) = parse_hashtag_file(text(data)) else { return false };
        assert_eq!(parse_hashtag_file(&format_hashtag_file(&rows)).unwrap(), rows);
        true
    });
}

#[test]
fn vector_line_seeds() {
    replay("vector_lines", |data| {
        let Ok(rows) = parse_vector_lines(text(data), "seed") else { return false };
        let enc = format_vector_lines(rows.iter().map(|(id, v)| (id.as_str(), v.as_slice())));
        assert_eq!(parse_vector_lines(&enc, "seed").unwrap(), rows);
        let table = EmbeddingTable::parse(text(data)).unwrap();
        assert_eq!(EmbeddingTable::parse(&table.to_text()).unwrap(), table);
        true
    });
}

#[test]
fn seg_dictionary_seeds() {
    replay("seg_dictionary", |data| {
        let (word, dict_text) = text(data).split_once('\n').unwrap();
        let Ok(dict) = SegDictionary::parse(dict_text) else { return false };
        assert_eq!(SegDictionary::parse(&dict.to_text()).unwrap(), dict);
        let seg = word_break_str(word, &dict).unwrap();
        assert_eq!(seg.tokens.concat(), word);
        true
    });
}

#[test]
fn checkpoint_seeds() {
    replay("checkpoint", |data| {
        let Ok((header, model)) = decode_checkpoint(data) else { return false };
        let enc = encode_checkpoint(&model, &header.meta);
        assert_eq!(enc, data, "encoding is canonical");
        assert_eq!(decode_checkpoint(&enc).unwrap().0, header);
        true
    });
}

#[test]
fn mask_png_seeds() {
    replay("mask_png", |data| decode_mask_png(data).is_ok());
}

#[test]
fn image_seeds() {
    replay("image", |data| match decode_image(data) {
        Ok(img) => {
            assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
            true
        }
        Err(_) => false,
    });
}

#[test]
fn region_record_seeds() {
    replay("region_record", |data| RegionRecord::from_json_str(text(data)).is_ok());
}
