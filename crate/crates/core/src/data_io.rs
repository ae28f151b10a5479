//! Text serialisation for datasets.
//!
//! A dataset is a record file plus a TOML sidecar (`<file>.header`) carrying
//! the generating [`TaskConfig`] and provenance. Records are one per line,
//! tab-separated, in the order given by [`FIELDS`]. Feature vectors are
//! comma-separated IEEE-754 bit patterns in 16-digit hex so they round-trip
//! exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{Ambiguity, Category, Instance, TaskConfig, Utility};
use crate::error::{Error, Result};
use crate::policy::Label;
use crate::seed::Provenance;

pub const DATASET_FORMAT: &str = "dyknow-dataset/1";
pub const FIELDS: &str = "id\tcategory\tgold\tambiguity\tutility\tquery\titem\tcontext";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub fields: String,
    pub records: usize,
    pub config_hash: String,
    pub seed: u64,
    pub task: TaskConfig,
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".header");
    PathBuf::from(s)
}

pub fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn parse_hex_f64(s: &str) -> Option<f64> {
    if s.len() != 16 {
        return None;
    }
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

fn hex_vec(v: &[f64]) -> String {
    v.iter().map(|x| hex_f64(*x)).collect::<Vec<_>>().join(",")
}

fn parse_hex_vec(s: &str) -> Option<Vec<f64>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(parse_hex_f64).collect()
}

pub fn format_record(inst: &Instance) -> String {
    let mut line = String::new();
    write!(
        line,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        inst.id,
        inst.category.name(),
        inst.gold.tier(),
        inst.ambiguity.name(),
        inst.utility.name(),
        hex_vec(&inst.query_features),
        hex_vec(&inst.item_features),
        hex_vec(&inst.context_features),
    )
    .expect("write to String");
    line
}

pub fn parse_record(line: &str) -> std::result::Result<Instance, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 8 {
        return Err(format!("expected 8 fields, found {}", f.len()));
    }
    let id = f[0].parse::<u64>().map_err(|e| format!("id: {e}"))?;
    let category = Category::parse(f[1]).ok_or_else(|| format!("unknown category {:?}", f[1]))?;
    let gold = f[2]
        .parse::<u8>()
        .ok()
        .and_then(Label::from_tier)
        .ok_or_else(|| format!("bad gold tier {:?}", f[2]))?;
    let ambiguity = Ambiguity::parse(f[3]).ok_or_else(|| format!("bad ambiguity {:?}", f[3]))?;
    let utility = Utility::parse(f[4]).ok_or_else(|| format!("bad utility {:?}", f[4]))?;
    let query_features = parse_hex_vec(f[5]).ok_or("bad query features")?;
    let item_features = parse_hex_vec(f[6]).ok_or("bad item features")?;
    let context_features = parse_hex_vec(f[7]).ok_or("bad context features")?;
    Ok(Instance {
        id,
        category,
        gold,
        ambiguity,
        utility,
        query_features,
        item_features,
        context_features,
    })
}

pub fn write_dataset(
    path: &Path,
    instances: &[Instance],
    task: &TaskConfig,
    prov: &Provenance,
) -> Result<()> {
    let mut body = String::new();
    for inst in instances {
        body.push_str(&format_record(inst));
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        fields: FIELDS.to_string(),
        records: instances.len(),
        config_hash: prov.config_hash.clone(),
        seed: prov.seed,
        task: task.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let hp = header_path(path);
    fs::write(&hp, text).map_err(|e| Error::io(&hp, e))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Instance>)> {
    let hp = header_path(path);
    let htext = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: DatasetHeader = toml::from_str(&htext).map_err(|e| Error::Parse {
        what: "dataset header",
        path: hp.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Parse {
            what: "dataset header",
            path: hp,
            line: 0,
            msg: format!("unsupported format {:?}", header.format),
        });
    }
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(header.records);
    for (i, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        out.push(parse_record(line).map_err(|msg| Error::Parse {
            what: "dataset record",
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?);
    }
    if out.len() != header.records {
        return Err(Error::Parse {
            what: "dataset",
            path: path.to_path_buf(),
            line: 0,
            msg: format!("header says {} records, found {}", header.records, out.len()),
        });
    }
    Ok((header, out))
}
