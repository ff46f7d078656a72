//! On-disk layout of `infer` output.
//!
//! ```text
//! predictions.txt          "ofnet-predictions 1", "count N", then "image <id> <H> <W>"
//! <id>.edge_prob.f32       raw network edge probability
//! <id>.orientation.f32     raw network orientation
//! <id>.thin_edge.f32       thinned edge strength
//! <id>.boundary_ori.f32    tangent-aligned orientation on the thinned edge, 0 elsewhere
//! <id>.boundary.png        thinned edge mask
//! ```
//!
//! All `.f32` files are row-major little-endian with no header.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ofnet::dataset::{read_f32_map, write_f32_map, write_mask_png};
use ofnet::eval::ImagePrediction;
use ofnet::postprocess::OcclusionBoundary;
use ofnet::{Error, Result};

pub const MANIFEST: &str = "predictions.txt";
const MAGIC: &str = "ofnet-predictions 1";

pub fn write_prediction(dir: &Path, id: &str, pred: &ImagePrediction, boundary: &OcclusionBoundary) -> Result<()> {
    write_f32_map(&dir.join(format!("{id}.edge_prob.f32")), &pred.edge_prob)?;
    write_f32_map(&dir.join(format!("{id}.orientation.f32")), &pred.orientation)?;
    write_f32_map(&dir.join(format!("{id}.thin_edge.f32")), &boundary.thin_edge)?;
    write_f32_map(&dir.join(format!("{id}.boundary_ori.f32")), &boundary.orientation)?;
    write_mask_png(&dir.join(format!("{id}.boundary.png")), &boundary.mask)
}

pub fn write_manifest(dir: &Path, entries: &[(String, usize, usize)]) -> Result<()> {
    let mut s = format!("{MAGIC}\ncount {}\n", entries.len());
    for (id, h, w) in entries {
        writeln!(s, "image {id} {h} {w}").expect("writing to a String");
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, s).map_err(|e| Error::Io { path, source: e })
}

pub fn read_manifest(dir: &Path) -> Result<Vec<(String, usize, usize)>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let bad = |line: usize, msg: String| Error::Data(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    if lines.next().map(|(_, l)| l.trim()) != Some(MAGIC) {
        return Err(bad(1, format!("first line must be {MAGIC:?}")));
    }
    let mut count = None;
    let mut entries = Vec::new();
    for (i, line) in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["count", n] => count = Some(n.parse::<usize>().map_err(|_| bad(i + 1, format!("bad count {n:?}")))?),
            ["image", id, h, w] => {
                let h = h.parse().map_err(|_| bad(i + 1, format!("bad height {h:?}")))?;
                let w = w.parse().map_err(|_| bad(i + 1, format!("bad width {w:?}")))?;
                entries.push((id.to_string(), h, w));
            }
            _ => return Err(bad(i + 1, format!("unrecognised line {line:?}"))),
        }
    }
    match count {
        Some(n) if n == entries.len() => Ok(entries),
        Some(n) => Err(bad(2, format!("count {n} but {} images listed", entries.len()))),
        None => Err(bad(2, "missing count line".into())),
    }
}

pub fn read_prediction(dir: &Path, id: &str, height: usize, width: usize) -> Result<ImagePrediction> {
    Ok(ImagePrediction {
        edge_prob: read_f32_map(&dir.join(format!("{id}.edge_prob.f32")), height, width)?,
        orientation: read_f32_map(&dir.join(format!("{id}.orientation.f32")), height, width)?,
    })
}
