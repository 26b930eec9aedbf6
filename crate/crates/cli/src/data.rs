//! Locating and loading dataset splits from one or more directories.
//!
//! A directory holds files named `{family}_{split}.pfdd` (as written by
//! `generate`). Loading a split scans every given directory, keyed by family;
//! the same family appearing in two directories is an error rather than a
//! silent merge.

use std::collections::BTreeMap;
use std::path::PathBuf;

use prose_fd::datagen::{load_dataset, Dataset, Family};

use crate::errors::CliError;

/// Loads `{family}_{split}.pfdd` from each directory. Splits that exist but
/// hold zero samples are skipped (a 90/10/0 split legitimately writes an
/// empty test file). Returns an error if nothing usable is found and
/// `required` is set.
pub fn load_split_map(
    dirs: &[PathBuf],
    split: &str,
    required: bool,
) -> Result<BTreeMap<Family, Dataset>, CliError> {
    let mut map: BTreeMap<Family, Dataset> = BTreeMap::new();
    let suffix = format!("_{split}.pfdd");
    for dir in dirs {
        if !dir.is_dir() {
            return Err(CliError::Io(format!("`{}` is not a directory", dir.display())));
        }
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        entries.sort();
        for path in entries {
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            let Some(stem) = name.strip_suffix(&suffix) else { continue };
            let Ok(family) = Family::from_name(stem) else { continue };
            let ds = load_dataset(&path)?;
            if ds.split != split {
                return Err(CliError::Config(format!(
                    "`{}` is named for split `{split}` but holds `{}`",
                    path.display(),
                    ds.split
                )));
            }
            if ds.is_empty() {
                continue;
            }
            if map.contains_key(&family) {
                return Err(CliError::Config(format!(
                    "family `{family}` appears in more than one data directory"
                )));
            }
            map.insert(family, ds);
        }
    }
    if required && map.is_empty() {
        let dirs: Vec<String> = dirs.iter().map(|d| d.display().to_string()).collect();
        return Err(CliError::Config(format!(
            "no non-empty `{split}` datasets found under {}",
            dirs.join(", ")
        )));
    }
    Ok(map)
}

/// Family names on the command line accept both `ins-forced` and
/// `ins_forced`.
pub fn parse_family(name: &str) -> Result<Family, CliError> {
    let canonical = name.replace('-', "_");
    Family::from_name(&canonical).map_err(|_| {
        CliError::Config(format!("unknown family `{name}` (expected swe, ins, or ins-forced)"))
    })
}
