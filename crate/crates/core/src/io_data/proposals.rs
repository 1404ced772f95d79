//! Proposal files: `frame_id category u_min v_min u_max v_max score` per line.

use super::types::RegionProposal2D;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

pub fn parse_proposals(text: &str, path: &Path) -> Result<Vec<(String, RegionProposal2D)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let f: Vec<&str> = raw.split_whitespace().collect();
        if f.is_empty() || f[0].starts_with('#') {
            continue;
        }
        if f.len() != 7 {
            return Err(Error::malformed(
                path,
                Some(i + 1),
                format!("expected 7 fields, found {}", f.len()),
            ));
        }
        let mut v = [0.0; 5];
        for (k, s) in f[2..].iter().enumerate() {
            v[k] = s
                .parse()
                .map_err(|_| Error::malformed(path, Some(i + 1), format!("not a number: {s:?}")))?;
        }
        let p = RegionProposal2D::new([v[0], v[1], v[2], v[3]], f[1], v[4])
            .map_err(|e| Error::malformed(path, Some(i + 1), e.to_string()))?;
        out.push((f[0].to_string(), p));
    }
    Ok(out)
}

pub fn load_proposals(path: impl AsRef<Path>) -> Result<Vec<(String, RegionProposal2D)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_proposals(&text, path)
}

pub fn format_proposals<'a>(items: impl IntoIterator<Item = (&'a str, &'a RegionProposal2D)>) -> String {
    let mut out = String::new();
    for (frame, p) in items {
        let [u0, v0, u1, v1] = p.image_box;
        let _ = writeln!(out, "{frame} {} {u0} {v0} {u1} {v1} {}", p.category, p.score_2d);
    }
    out
}
