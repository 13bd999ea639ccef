//! Parameter checkpoints: one tensor file per parameter plus a manifest.
//!
//! Layout of a checkpoint directory:
//!
//! ```text
//! manifest.tsv      name <TAB> role <TAB> B,C,H,W <TAB> file
//! t0000.snt         tensor files in manifest order
//! t0001.snt
//! ...
//! ```

use crate::error::{Error, Result};
use crate::params::{ParamRole, ParamSet};
use crate::tensor_io::{read_tensor, write_tensor};
use std::path::Path;

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes every parameter of `set` under `dir`, creating it if needed.
pub fn write_checkpoint(dir: &Path, set: &ParamSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for (i, entry) in set.iter().enumerate() {
        let file = format!("t{i:04}.snt");
        let [b, c, h, w] = entry.value.shape();
        manifest.push_str(&format!(
            "{}\t{}\t{},{},{},{}\t{}\n",
            entry.name,
            entry.role.as_str(),
            b,
            c,
            h,
            w,
            file
        ));
        write_tensor(&dir.join(&file), &entry.value)?;
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)
        .map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Reads a checkpoint back into a fresh [`ParamSet`] in manifest order.
pub fn read_checkpoint(dir: &Path) -> Result<ParamSet> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut set = ParamSet::new();
    for (line_no, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: manifest_path.display().to_string(),
                offset: line_no,
                detail: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let role = ParamRole::parse(fields[1]).ok_or_else(|| Error::Parse {
            path: manifest_path.display().to_string(),
            offset: line_no,
            detail: format!("unknown role {:?}", fields[1]),
        })?;
        let tensor = read_tensor(&dir.join(fields[3]))?;
        let declared: Vec<usize> = fields[2]
            .split(',')
            .filter_map(|s| s.parse().ok())
            .collect();
        if declared != tensor.shape().to_vec() {
            return Err(Error::Parse {
                path: manifest_path.display().to_string(),
                offset: line_no,
                detail: format!(
                    "manifest shape {:?} disagrees with tensor file {:?}",
                    declared,
                    tensor.shape()
                ),
            });
        }
        set.add(fields[0], tensor, role);
    }
    Ok(set)
}

/// Largest absolute element-wise difference between two same-layout sets.
pub fn max_param_difference(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "checkpoint entry count",
            a.len().to_string(),
            b.len().to_string(),
        ));
    }
    let mut worst = 0.0f64;
    for (ea, eb) in a.iter().zip(b.iter()) {
        worst = worst.max(ea.value.sub(&eb.value)?.max_abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ConvLayer, Init, ParamSet};
    use crate::tensor::ConvSpec;
    use crate::testutil::rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut set = ParamSet::new();
        let mut r = rng(131);
        ConvLayer::init(&mut set, "layer1", ConvSpec::same(4, 2, 3).unwrap(), Init::He, &mut r);
        ConvLayer::init(&mut set, "layer2", ConvSpec::same(2, 4, 3).unwrap(), Init::He, &mut r);

        let dir = std::env::temp_dir().join("snad-checkpoint-tests/rt");
        let _ = std::fs::remove_dir_all(&dir);
        write_checkpoint(&dir, &set).unwrap();
        let back = read_checkpoint(&dir).unwrap();
        assert_eq!(back.len(), set.len());
        assert_eq!(max_param_difference(&set, &back).unwrap(), 0.0);
        for (a, b) in set.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.role, b.role);
        }
    }
}
