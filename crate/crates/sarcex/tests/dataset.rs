//! Dataset and artifact file formats.

use proptest::prelude::*;
use sarcex::artifacts::{read_loss_csv, write_loss_csv};
use sarcex::dataset::{load_file, load_split, write_file};
use sarcex::error::Error;
use sarcex_core::corpus::Sample;
use sarcex_core::generator::LossRecord;

fn write(dir: &std::path::Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let good = r#"{"id": "a", "image": "a.jpg", "caption": "c", "explanation": "e", "target": "t"}"#;
    let p = write(dir.path(), "train.jsonl", &format!("{good}\n\n{{broken\n"));
    match load_file(&p).unwrap_err() {
        Error::Parse { line, .. } => assert_eq!(line, 3),
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn missing_and_empty_fields_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"id": "a", "image": "a.jpg", "caption": "c", "explanation": "e"}"#, "target"),
        (r#"{"id": "a", "image": "a.jpg", "caption": "  ", "explanation": "e", "target": "t"}"#, "caption"),
        (r#"{"image": "a.jpg", "caption": "c", "explanation": "e", "target": "t"}"#, "id"),
        (r#"{"id": "a", "image": "", "caption": "c", "explanation": "e", "target": "t"}"#, "image"),
    ];
    for (line, want) in cases {
        let p = write(dir.path(), "x.jsonl", line);
        match load_file(&p).unwrap_err() {
            Error::MissingField { field, line, .. } => {
                assert_eq!(field, want);
                assert_eq!(line, 1);
            }
            e => panic!("unexpected {e:?}"),
        }
    }
}

#[test]
fn numeric_ids_nfc_and_missing_images() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("here.jpg"), b"x").unwrap();
    let text = concat!(
        r#"{"id": 7, "image": "here.jpg", "caption": "café", "explanation": "e", "target": "t"}"#,
        "\n",
        r#"{"id": "b", "image": "gone.jpg", "caption": "c", "explanation": "e", "target": "t"}"#,
        "\n",
        r#"{"id": "c", "image": "https://example.org/c.jpg", "caption": "c", "explanation": "e", "target": "t"}"#,
        "\n"
    );
    let p = write(dir.path(), "test.jsonl", text);
    let loaded = load_file(&p).unwrap();
    assert_eq!(loaded.samples[0].id, "7");
    assert_eq!(loaded.samples[0].caption, "caf\u{e9}");
    assert_eq!(loaded.missing_images, vec!["b"]);
}

#[test]
fn unknown_split_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_split(dir.path(), "dev"), Err(Error::Usage(_))));
    let err = load_split(dir.path(), "val").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 2);
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.!?'\"é]{0,20}[a-z]"
}

proptest! {
    #[test]
    fn dataset_round_trip(rows in prop::collection::vec((text(), text(), text(), text()), 1..8)) {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = rows
            .iter()
            .enumerate()
            .map(|(i, (img, c, e, t))| Sample {
                id: format!("s{i}"),
                image_ref: format!("{}.jpg", img.trim()),
                caption: c.clone(),
                explanation: e.clone(),
                target: t.clone(),
            })
            .collect();
        let p = dir.path().join("train.jsonl");
        write_file(&p, &samples).unwrap();
        prop_assert_eq!(load_file(&p).unwrap().samples, samples);
    }

    #[test]
    fn loss_csv_round_trip(losses in prop::collection::vec(0.0f64..50.0, 0..30)) {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<LossRecord> = losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| LossRecord { step: i, epoch: i / 4, loss, tokens: 10 + i })
            .collect();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &records).unwrap();
        let back = read_loss_csv(&p).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for ((step, loss), r) in back.iter().zip(&records) {
            prop_assert_eq!(*step, r.step);
            prop_assert_eq!(loss.to_bits(), r.loss.to_bits());
        }
    }
}
