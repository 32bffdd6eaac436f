//! Dataset manifest: a line-oriented text index next to a binary clip file
//! in the shared container format.

use super::{Category, ClipRecord, CuratedDataset, Flags, Origin};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::ParamSet;
use std::path::Path;

fn flags_label(f: Flags) -> String {
    match (f.hard_category, f.failure) {
        (false, false) => String::new(),
        (true, false) => "hard".into(),
        (true, true) => "hard|failure".into(),
        (false, true) => "failure".into(),
    }
}

fn parse_flags(s: &str) -> Result<Flags> {
    let mut f = Flags::default();
    for part in s.split('|').filter(|p| !p.is_empty()) {
        match part {
            "hard" => f.hard_category = true,
            "failure" => f.failure = true,
            other => {
                return Err(Error::Malformed { what: "manifest flags", detail: other.to_string() })
            }
        }
    }
    Ok(f)
}

/// Write `manifest_path` (text) and `data_path` (clip tensors in the binary
/// container, one leaf per record named `clip/<id>`).
pub fn write_manifest(
    dataset: &CuratedDataset,
    manifest_path: &Path,
    data_path: &Path,
) -> Result<()> {
    let m = &dataset.manifest;
    let mut out = String::new();
    out.push_str("# dataset-manifest v1\n");
    out.push_str(&format!("# records: {}\n", m.total));
    out.push_str(&format!("# synthetic: {} real: {}\n", m.synthetic, m.real));
    out.push_str(&format!("# hard: {} failures: {}\n", m.hard, m.failures));
    for ((cat, origin), n) in &m.counts {
        out.push_str(&format!("# count: {}/{} = {}\n", cat.label(), origin.label(), n));
    }
    out.push_str("id,category,origin,quality,physics,weight,flags\n");
    for r in &dataset.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id,
            r.category.label(),
            r.origin.label(),
            r.quality,
            r.physics,
            r.weight,
            flags_label(r.flags)
        ));
    }
    std::fs::write(manifest_path, out)?;

    let mut clips = ParamSet::new();
    for r in &dataset.records {
        clips.insert(format!("clip/{:08}", r.id), r.frames.clone());
    }
    checkpoint::save_params(data_path, &clips)?;
    Ok(())
}

/// Read a dataset back from its manifest and clip file. The rebuilt
/// manifest is verified against the recorded header counts.
pub fn read_manifest(manifest_path: &Path, data_path: &Path) -> Result<CuratedDataset> {
    let text = std::fs::read_to_string(manifest_path)?;
    let clips = checkpoint::load_params(data_path)?;

    let mut header_total: Option<usize> = None;
    let mut records = Vec::new();
    let mut seen_columns = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# records: ") {
            header_total = Some(rest.trim().parse().map_err(|_| Error::Malformed {
                what: "manifest header",
                detail: line.to_string(),
            })?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if !seen_columns {
            // Column header row.
            seen_columns = true;
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(7, ',').collect();
        if fields.len() != 7 {
            return Err(Error::Malformed { what: "manifest row", detail: line.to_string() });
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Malformed { what: "manifest number", detail: s.to_string() })
        };
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| Error::Malformed { what: "manifest id", detail: fields[0].into() })?;
        let frames = clips.get(&format!("clip/{id:08}"))?.clone();
        records.push(ClipRecord {
            id,
            category: Category::from_label(fields[1])?,
            origin: Origin::from_label(fields[2])?,
            quality: parse_f(fields[3])?,
            physics: parse_f(fields[4])?,
            weight: parse_f(fields[5])?,
            flags: parse_flags(fields[6])?,
            frames,
        });
    }

    let dataset = CuratedDataset::new(records);
    if let Some(total) = header_total {
        if total != dataset.manifest.total {
            return Err(Error::Malformed {
                what: "manifest",
                detail: format!(
                    "header says {total} records, file holds {}",
                    dataset.manifest.total
                ),
            });
        }
    }
    Ok(dataset)
}
