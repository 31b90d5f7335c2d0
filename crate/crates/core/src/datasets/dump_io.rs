//! `.podump` detection dumps: per-image prediction lists with class scores
//! and OOD energies, enough for either evaluation protocol.
//!
//! ```text
//! PODUMP
//! version: 1
//! images: 2
//! predictions: 3
//! checksum: 0123456789abcdef
//! image image_id=0 source=id_dataset annotated=1
//! pred cls_score=0.93 ood_score=2.41 g=1
//! pred cls_score=0.12 ood_score=0.77
//! image image_id=1 source=ood_dataset annotated=1
//! pred cls_score=0.81 ood_score=0.35 g=0
//! ```
//!
//! Fields on `image` and `pred` lines are `name=value` pairs in any order.
//! `g` (the thresholded ID decision) is optional.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluator::{ImageGroup, ScoredPrediction, Source};
use crate::textfmt::{self, Lines};

const MAGIC: &str = "PODUMP";
const KEYS: [&str; 2] = ["images", "predictions"];

pub fn render_detection_dump(groups: &[ImageGroup]) -> String {
    let total: usize = groups.iter().map(|g| g.predictions.len()).sum();
    let mut out = String::new();
    textfmt::write_header(
        &mut out,
        MAGIC,
        &[
            ("images", groups.len().to_string()),
            ("predictions", total.to_string()),
        ],
    );
    for g in groups {
        let _ = writeln!(
            out,
            "image image_id={} source={} annotated={}",
            g.image_id, g.source, g.annotated_k
        );
        for p in &g.predictions {
            let _ = write!(
                out,
                "pred cls_score={} ood_score={}",
                p.cls_score, p.ood_score
            );
            if let Some(decision) = p.decision {
                let _ = write!(out, " g={}", u8::from(decision));
            }
            out.push('\n');
        }
    }
    out
}

pub fn save_detection_dump(groups: &[ImageGroup], path: impl AsRef<Path>) -> Result<()> {
    textfmt::write_file(path.as_ref(), &render_detection_dump(groups))
}

pub fn load_detection_dump(path: impl AsRef<Path>) -> Result<Vec<ImageGroup>> {
    parse_detection_dump(&textfmt::read_file(path.as_ref())?)
}

pub fn parse_detection_dump(text: &str) -> Result<Vec<ImageGroup>> {
    let mut lines = Lines::new(text);
    let header = textfmt::read_header(&mut lines, MAGIC, &KEYS)?;
    let images: usize = header.parse(0, "images")?;
    let predictions: usize = header.parse(1, "predictions")?;

    let mut groups: Vec<ImageGroup> = Vec::with_capacity(images);
    let mut pred_index = 0usize;
    while let Some((n, line)) = lines.next_line()? {
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        let fields = named_fields(n, rest)?;
        match kind {
            "image" => {
                let index = groups.len();
                let get = |name: &str| required(&fields, name, "image", index, n);
                let image_id: u64 = parse_field(n, "image_id", get("image_id")?)?;
                let source: Source = get("source")?
                    .parse()
                    .map_err(|_| Error::parse(n, format!("image {index}: invalid source")))?;
                let annotated_k: usize = parse_field(n, "annotated", get("annotated")?)?;
                groups.push(ImageGroup {
                    image_id,
                    source,
                    annotated_k,
                    predictions: Vec::new(),
                });
            }
            "pred" => {
                let get = |name: &str| required(&fields, name, "record", pred_index, n);
                let cls_score = textfmt::parse_f64(n, "cls_score", get("cls_score")?)?;
                let ood_score = textfmt::parse_f64(n, "ood_score", get("ood_score")?)?;
                let decision = match fields.get("g").copied() {
                    None => None,
                    Some("1") => Some(true),
                    Some("0") => Some(false),
                    Some(other) => {
                        return Err(Error::parse(
                            n,
                            format!("record {pred_index}: invalid g {other:?}"),
                        ))
                    }
                };
                let group = groups.last_mut().ok_or_else(|| {
                    Error::parse(
                        n,
                        format!("record {pred_index}: prediction before any image line"),
                    )
                })?;
                group.predictions.push(ScoredPrediction {
                    image_id: group.image_id,
                    source: group.source,
                    cls_score,
                    ood_score,
                    decision,
                });
                pred_index += 1;
            }
            other => return Err(Error::parse(n, format!("unknown line type {other:?}"))),
        }
    }
    if groups.len() != images || pred_index != predictions {
        return Err(Error::parse(
            lines.line_number() + 1,
            format!(
                "truncated or inconsistent dump: header declares {images} images / {predictions} predictions, found {} / {pred_index}",
                groups.len()
            ),
        ));
    }
    Ok(groups)
}

fn named_fields(line: usize, rest: &str) -> Result<BTreeMap<&str, &str>> {
    let mut out = BTreeMap::new();
    for token in rest.split(' ').filter(|t| !t.is_empty()) {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| Error::parse(line, format!("expected name=value, found {token:?}")))?;
        if out.insert(k, v).is_some() {
            return Err(Error::parse(line, format!("duplicate field `{k}`")));
        }
    }
    Ok(out)
}

fn required<'a>(
    fields: &BTreeMap<&str, &'a str>,
    name: &str,
    what: &str,
    index: usize,
    line: usize,
) -> Result<&'a str> {
    fields.get(name).copied().ok_or_else(|| {
        Error::parse(
            line,
            format!("{what} {index}: missing required field `{name}`"),
        )
    })
}

fn parse_field<T: std::str::FromStr>(line: usize, name: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::parse(line, format!("invalid value {v:?} for `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pred(
        image_id: u64,
        source: Source,
        cls: f64,
        ood: f64,
        g: Option<bool>,
    ) -> ScoredPrediction {
        ScoredPrediction {
            image_id,
            source,
            cls_score: cls,
            ood_score: ood,
            decision: g,
        }
    }

    fn sample() -> Vec<ImageGroup> {
        vec![
            ImageGroup {
                image_id: 4,
                source: Source::IdDataset,
                annotated_k: 2,
                predictions: vec![
                    pred(4, Source::IdDataset, 0.9, 2.5, Some(true)),
                    pred(4, Source::IdDataset, 0.8, 1.25, None),
                    pred(4, Source::IdDataset, 0.3, 0.1, Some(false)),
                ],
            },
            ImageGroup {
                image_id: 11,
                source: Source::OodDataset,
                annotated_k: 1,
                predictions: vec![pred(11, Source::OodDataset, 0.7, 0.4, Some(false))],
            },
        ]
    }

    #[test]
    fn empty_dump() {
        assert!(parse_detection_dump(&render_detection_dump(&[]))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn round_trip() {
        let groups = sample();
        let parsed = parse_detection_dump(&render_detection_dump(&groups)).unwrap();
        assert_eq!(parsed, groups);
        assert_eq!(parsed[0].annotated_k, 2);
        assert_eq!(parsed[0].predictions.len(), 3);
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.podump");
        save_detection_dump(&sample(), &path).unwrap();
        assert_eq!(load_detection_dump(&path).unwrap(), sample());
    }

    #[test]
    fn missing_field_names_field_and_record() {
        let text = render_detection_dump(&sample()).replacen(" ood_score=1.25", "", 1);
        let err = parse_detection_dump(&text).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
        assert!(err.contains("ood_score"), "{err}");

        let text = render_detection_dump(&sample()).replacen(" annotated=1", "", 1);
        let err = parse_detection_dump(&text).unwrap_err().to_string();
        assert!(
            err.contains("image 1") && err.contains("annotated"),
            "{err}"
        );
    }

    #[test]
    fn fields_in_any_order() {
        let text = render_detection_dump(&sample()).replacen(
            "pred cls_score=0.9 ood_score=2.5 g=1",
            "pred g=1 ood_score=2.5 cls_score=0.9",
            1,
        );
        assert_eq!(parse_detection_dump(&text).unwrap(), sample());
    }

    #[test]
    fn truncation_detected() {
        let text = render_detection_dump(&sample());
        let cut = text[..text.len() - 1].rfind('\n').unwrap() + 1;
        assert!(matches!(
            parse_detection_dump(&text[..cut]),
            Err(Error::Parse { .. })
        ));
    }

    proptest! {
        #[test]
        fn header_corruption_is_always_rejected(pos in 0usize..1000, byte in 0u8..128) {
            let text = render_detection_dump(&sample());
            let header_len = text.match_indices('\n').nth(4).unwrap().0 + 1;
            let pos = pos % header_len;
            let mut bytes = text.into_bytes();
            prop_assume!(bytes[pos] != byte);
            bytes[pos] = byte;
            prop_assert!(parse_detection_dump(&String::from_utf8(bytes).unwrap()).is_err());
        }
    }
}
