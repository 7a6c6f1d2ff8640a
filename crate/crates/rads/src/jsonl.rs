//! JSON Lines helpers: ScoredBox streams and pseudo-label files.

use std::io::{BufRead, Write};

use anyhow::{bail, Context, Result};
use rads_core::label::PseudoLabelSet;
use rads_core::ScoredBox;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn write_lines<T: Serialize>(mut w: impl Write, items: impl IntoIterator<Item = T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Blank lines are skipped.
pub fn read_lines<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("line {}", i + 1))?);
    }
    Ok(out)
}

/// First line of a pseudo-label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelHeader {
    pub image: String,
    pub threshold: f64,
    pub backend: String,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
}

fn default_iou() -> f64 {
    0.5
}

pub fn write_pseudo_labels(mut w: impl Write, set: &PseudoLabelSet) -> Result<()> {
    let header = PseudoLabelHeader {
        image: set.image.clone(),
        threshold: set.threshold,
        backend: set.backend.clone(),
        iou_threshold: set.iou_threshold,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    write_lines(w, &set.boxes)
}

pub fn read_pseudo_labels(r: impl BufRead) -> Result<PseudoLabelSet> {
    let mut lines = r.lines();
    let header: PseudoLabelHeader = loop {
        match lines.next() {
            Some(l) => {
                let l = l?;
                if !l.trim().is_empty() {
                    break serde_json::from_str(&l).context("header line")?;
                }
            }
            None => bail!("empty pseudo-label file"),
        }
    };
    let mut boxes = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l?;
        if !l.trim().is_empty() {
            boxes.push(serde_json::from_str::<ScoredBox>(&l).with_context(|| format!("box line {}", i + 2))?);
        }
    }
    Ok(PseudoLabelSet {
        image: header.image,
        boxes,
        backend: header.backend,
        threshold: header.threshold,
        iou_threshold: header.iou_threshold,
    })
}
