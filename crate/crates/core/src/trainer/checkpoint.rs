//! `.pockpt` checkpoints: everything inference needs, as text.
//!
//! The header carries the model shape and decision rule. The body lists
//! each trainable matrix (`matrix <name> <rows> <cols>` followed by one line
//! per row), then the prototype bank (`bank <t> <d>` followed by
//! `proto <seen> <values…>` lines), then a `body_checksum:` line over the
//! body bytes. Floats are written in shortest round-trip form, so a reload
//! is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::proto_head::{ModelConfig, ModelState, OodDecisionConfig, PrototypeBank};
use crate::textfmt::{self, Lines};

const MAGIC: &str = "POCKPT";
const KEYS: [&str; 9] = [
    "t",
    "h",
    "d",
    "projection_hidden",
    "similarity_hidden",
    "alpha",
    "relu_before_sigmoid",
    "gamma",
    "reduction",
];

pub fn render_checkpoint(state: &ModelState) -> String {
    let c = &state.config;
    let mut out = String::new();
    textfmt::write_header(
        &mut out,
        MAGIC,
        &[
            ("t", c.t.to_string()),
            ("h", c.h.to_string()),
            ("d", c.d.to_string()),
            ("projection_hidden", c.projection_hidden.to_string()),
            ("similarity_hidden", c.similarity_hidden.to_string()),
            ("alpha", c.alpha.to_string()),
            ("relu_before_sigmoid", c.relu_before_sigmoid.to_string()),
            ("gamma", state.decision.gamma.to_string()),
            ("reduction", state.decision.reduction.as_str().to_string()),
        ],
    );
    let body_start = out.len();
    for p in state.parameters() {
        let _ = writeln!(
            out,
            "matrix {} {} {}",
            p.name,
            p.value.rows(),
            p.value.cols()
        );
        for row in p.value.row_iter() {
            write_values(&mut out, row);
        }
    }
    let bank = &state.bank;
    let _ = writeln!(out, "bank {} {}", bank.categories(), bank.dim());
    for (row, &seen) in bank.prototypes().row_iter().zip(bank.seen()) {
        let _ = write!(out, "proto {} ", u8::from(seen));
        write_values(&mut out, row);
    }
    let sum = textfmt::digest_hex(&out.as_bytes()[body_start..], 8);
    let _ = writeln!(out, "body_checksum: {sum}");
    out
}

fn write_values(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

pub fn parse_checkpoint(text: &str) -> Result<ModelState> {
    let mut lines = Lines::new(text);
    let header = textfmt::read_header(&mut lines, MAGIC, &KEYS)?;
    let config = ModelConfig {
        t: header.parse(0, "t")?,
        h: header.parse(1, "h")?,
        d: header.parse(2, "d")?,
        projection_hidden: header.parse(3, "projection_hidden")?,
        similarity_hidden: header.parse(4, "similarity_hidden")?,
        alpha: header.parse(5, "alpha")?,
        relu_before_sigmoid: header.parse(6, "relu_before_sigmoid")?,
    };
    let decision = OodDecisionConfig {
        gamma: header.parse(7, "gamma")?,
        reduction: header.raw(8).parse()?,
    };
    let mut state = ModelState::new(config, decision, 0).map_err(format_error)?;

    let body_start = lines.offset();
    for p in state.parameters_mut() {
        let (n, line) = lines.expect_line("matrix header")?;
        let expected = format!("matrix {} {} {}", p.name, p.value.rows(), p.value.cols());
        if line != expected {
            return Err(Error::parse(
                n,
                format!("expected {expected:?}, found {line:?}"),
            ));
        }
        let cols = p.value.cols();
        for r in 0..p.value.rows() {
            let (n, line) = lines.expect_line("matrix row")?;
            let values = parse_values(n, line, cols)?;
            p.value.row_mut(r).copy_from_slice(&values);
        }
    }

    let (n, line) = lines.expect_line("bank header")?;
    let expected = format!("bank {} {}", state.config.t, state.config.d);
    if line != expected {
        return Err(Error::parse(
            n,
            format!("expected {expected:?}, found {line:?}"),
        ));
    }
    let mut prototypes = Matrix::zeros(state.config.t, state.config.d);
    let mut seen = Vec::with_capacity(state.config.t);
    for c in 0..state.config.t {
        let (n, line) = lines.expect_line("prototype row")?;
        let rest = line
            .strip_prefix("proto ")
            .ok_or_else(|| Error::parse(n, "expected a proto line"))?;
        let (flag, values) = rest
            .split_once(' ')
            .ok_or_else(|| Error::parse(n, "proto line has no values"))?;
        seen.push(match flag {
            "1" => true,
            "0" => false,
            other => return Err(Error::parse(n, format!("invalid seen flag {other:?}"))),
        });
        prototypes
            .row_mut(c)
            .copy_from_slice(&parse_values(n, values, state.config.d)?);
    }
    let body_end = lines.offset();
    let (n, line) = lines.expect_line("body checksum")?;
    let stored = line
        .strip_prefix("body_checksum: ")
        .ok_or_else(|| Error::parse(n, "expected body_checksum"))?;
    if stored != textfmt::digest_hex(&text.as_bytes()[body_start..body_end], 8) {
        return Err(Error::Format("checkpoint body checksum mismatch".into()));
    }
    if !lines.is_done() {
        return Err(Error::Format("trailing content after checkpoint".into()));
    }
    state.bank =
        PrototypeBank::from_parts(prototypes, state.config.alpha, seen).map_err(format_error)?;
    Ok(state)
}

fn parse_values(n: usize, line: &str, expected: usize) -> Result<Vec<f64>> {
    let values = line
        .split(' ')
        .map(|s| textfmt::parse_f64(n, "value", s))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != expected {
        return Err(Error::parse(
            n,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

/// Inconsistent contents of a well-framed file are a format problem, not a
/// configuration one.
fn format_error(e: Error) -> Error {
    match e {
        Error::Config(m) | Error::State(m) => Error::Format(format!("checkpoint: {m}")),
        other => other,
    }
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    textfmt::write_file(path.as_ref(), &render_checkpoint(state))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    parse_checkpoint(&textfmt::read_file(path.as_ref())?)
}
