//! `.posplit` feature split files.
//!
//! ```text
//! POSPLIT
//! version: 1
//! role: train
//! t: 5
//! h: 64
//! count: 1250
//! checksum: 0123456789abcdef
//! <image_id> <id|ood|bg> <category|-> <annotated 0|1> <cls_score> <h floats>
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so a save/load
//! cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{DatasetSplit, FeatureRecord, ObjectKind, SplitRole};
use crate::error::{Error, Result};
use crate::textfmt::{self, Lines};

const MAGIC: &str = "POSPLIT";
const KEYS: [&str; 4] = ["role", "t", "h", "count"];

pub fn render_split(split: &DatasetSplit) -> String {
    let mut out = String::new();
    textfmt::write_header(
        &mut out,
        MAGIC,
        &[
            ("role", split.role.to_string()),
            ("t", split.t.to_string()),
            ("h", split.h.to_string()),
            ("count", split.records.len().to_string()),
        ],
    );
    for r in &split.records {
        let category = match r.kind {
            ObjectKind::Id(c) => c.to_string(),
            _ => "-".to_string(),
        };
        let _ = write!(
            out,
            "{} {} {} {} {}",
            r.image_id,
            r.kind.tag(),
            category,
            u8::from(r.annotated),
            r.cls_score
        );
        for v in &r.feature {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn save_split(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    textfmt::write_file(path.as_ref(), &render_split(split))
}

pub fn load_split(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    parse_split(&textfmt::read_file(path.as_ref())?)
}

pub fn parse_split(text: &str) -> Result<DatasetSplit> {
    let mut lines = Lines::new(text);
    let header = textfmt::read_header(&mut lines, MAGIC, &KEYS)?;
    let role: SplitRole = header.raw(0).parse()?;
    let t: usize = header.parse(1, "t")?;
    let h: usize = header.parse(2, "h")?;
    let count: usize = header.parse(3, "count")?;

    let mut records = Vec::with_capacity(count);
    while let Some((n, line)) = lines.next_line()? {
        if records.len() == count {
            return Err(Error::Format(format!(
                "line {n}: more records than the declared count {count}"
            )));
        }
        records.push(parse_record(n, line, h)?);
    }
    if records.len() != count {
        return Err(Error::parse(
            lines.line_number() + 1,
            format!(
                "truncated file: expected {count} records, found {}",
                records.len()
            ),
        ));
    }
    DatasetSplit::new(records, t, h, role)
}

fn parse_record(n: usize, line: &str, h: usize) -> Result<FeatureRecord> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 5 + h {
        return Err(Error::Format(format!(
            "line {n}: expected {} fields (5 + h = {h}), found {}",
            5 + h,
            fields.len()
        )));
    }
    let image_id: u64 = fields[0]
        .parse()
        .map_err(|_| Error::parse(n, format!("invalid image_id {:?}", fields[0])))?;
    let kind = match (fields[1], fields[2]) {
        ("id", c) => ObjectKind::Id(
            c.parse()
                .map_err(|_| Error::parse(n, format!("invalid category {c:?}")))?,
        ),
        ("ood", "-") => ObjectKind::Ood,
        ("bg", "-") => ObjectKind::Background,
        (k, c) => {
            return Err(Error::parse(
                n,
                format!("invalid kind/category pair {k:?} {c:?}"),
            ))
        }
    };
    let annotated = match fields[3] {
        "1" => true,
        "0" => false,
        other => return Err(Error::parse(n, format!("invalid annotated flag {other:?}"))),
    };
    let cls_score = textfmt::parse_f64(n, "cls_score", fields[4])?;
    let feature = fields[5..]
        .iter()
        .map(|s| textfmt::parse_f64(n, "feature", s))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureRecord {
        image_id,
        feature,
        kind,
        cls_score,
        annotated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, SyntheticConfig};
    use proptest::prelude::*;

    fn small_split() -> DatasetSplit {
        let cfg = SyntheticConfig {
            t: 3,
            h: 4,
            per_class: 3,
            ..Default::default()
        };
        generate_synthetic(&cfg).unwrap().id_eval
    }

    #[test]
    fn round_trip_is_exact() {
        let split = small_split();
        assert_eq!(parse_split(&render_split(&split)).unwrap(), split);
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.posplit");
        let split = small_split();
        save_split(&split, &path).unwrap();
        assert_eq!(load_split(&path).unwrap(), split);
    }

    #[test]
    fn empty_split_round_trips() {
        let split = DatasetSplit::empty(5, 64, SplitRole::Train);
        assert_eq!(parse_split(&render_split(&split)).unwrap(), split);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = render_split(&small_split());
        let cut_mid_line = &text[..text.len() - 7];
        assert!(matches!(
            parse_split(cut_mid_line),
            Err(Error::Parse { .. })
        ));
        let last_line_start = text[..text.len() - 1].rfind('\n').unwrap() + 1;
        assert!(matches!(
            parse_split(&text[..last_line_start]),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let text = render_split(&small_split()).replacen("POSPLIT", "POSPLIX", 1);
        assert!(matches!(parse_split(&text), Err(Error::Format(_))));
    }

    #[test]
    fn width_mismatch_is_a_format_error() {
        let text = render_split(&small_split());
        let mut lines: Vec<&str> = text.lines().collect();
        let shortened = lines[7].rsplit_once(' ').unwrap().0.to_string();
        lines[7] = &shortened;
        let broken = lines.join("\n") + "\n";
        assert!(matches!(parse_split(&broken), Err(Error::Format(_))));
    }

    #[test]
    fn bad_number_reports_line() {
        let text = render_split(&small_split());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let (head, tail) = lines[8].rsplit_once(' ').unwrap();
        lines[8] = format!("{head} {}", tail.replace('.', "q"));
        let broken = lines.join("\n") + "\n";
        match parse_split(&broken) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ood_in_train_is_rejected() {
        let mut split = small_split();
        split.role = SplitRole::Train;
        split.records[0].kind = ObjectKind::Ood;
        assert!(parse_split(&render_split(&split)).is_err());
    }

    proptest! {
        #[test]
        fn header_corruption_is_always_rejected(pos in 0usize..1000, byte in 0u8..128) {
            let text = render_split(&small_split());
            let header_len = text.match_indices('\n').nth(6).unwrap().0 + 1;
            let pos = pos % header_len;
            let mut bytes = text.into_bytes();
            prop_assume!(bytes[pos] != byte);
            bytes[pos] = byte;
            let corrupted = String::from_utf8(bytes).unwrap();
            prop_assert!(parse_split(&corrupted).is_err());
        }

        #[test]
        fn arbitrary_floats_round_trip(values in proptest::collection::vec(-1e300f64..1e300, 4), score in 0.0f64..=1.0) {
            let split = DatasetSplit::new(
                vec![FeatureRecord {
                    image_id: 9,
                    feature: values,
                    kind: ObjectKind::Id(1),
                    cls_score: score,
                    annotated: true,
                }],
                3,
                4,
                SplitRole::IdEval,
            )
            .unwrap();
            prop_assert_eq!(parse_split(&render_split(&split)).unwrap(), split);
        }
    }
}
