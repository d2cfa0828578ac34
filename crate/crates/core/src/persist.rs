//! Versioned JSON documents with reals written to 17 significant digits.

use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};

/// Pretty JSON, except every float is printed as `d.dddddddddddddddde±x`.
struct SeventeenDigits<'a>(PrettyFormatter<'a>);

impl Formatter for SeventeenDigits<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let fmt = SeventeenDigits(PrettyFormatter::with_indent(b" "));
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Persistence(e.to_string()))?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Persistence(e.to_string()))
}

pub fn write<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_string(value)?)?;
    Ok(())
}

/// Parses a document after checking its `version` field against `expected`.
pub fn from_str<T: DeserializeOwned>(text: &str, kind: &str, expected: u32) -> Result<T> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Persistence(format!("malformed {kind} file: {e}")))?;
    let version = raw
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Persistence(format!("{kind} file has no version field")))?;
    if version != u64::from(expected) {
        return Err(Error::Persistence(format!(
            "{kind} file version {version} is not supported (expected {expected})"
        )));
    }
    serde_json::from_value(raw).map_err(|e| Error::Persistence(format!("malformed {kind} file: {e}")))
}

pub fn read<T: DeserializeOwned>(path: impl AsRef<Path>, kind: &str, expected: u32) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Persistence(format!("cannot read {}: {e}", path.display())))?;
    from_str(&text, kind, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Doc {
        version: u32,
        x: Vec<f64>,
    }

    #[test]
    fn seventeen_digits() {
        let s = to_string(&Doc {
            version: 1,
            x: vec![0.1, -2.5e-300],
        })
        .unwrap();
        assert!(s.contains("1.0000000000000001e-1"), "{s}");
        assert!(s.contains("-2.5000000000000000e-300"), "{s}");
    }

    #[test]
    fn version_mismatch_names_both() {
        let e = from_str::<Doc>("{\"version\": 7, \"x\": []}", "test", 1)
            .unwrap_err()
            .to_string();
        assert!(e.contains('7') && e.contains('1'), "{e}");
    }

    proptest! {
        #[test]
        fn floats_round_trip_exactly(x in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..20)) {
            let d = Doc { version: 1, x };
            let back: Doc = from_str(&to_string(&d).unwrap(), "test", 1).unwrap();
            for (a, b) in back.x.iter().zip(&d.x) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
