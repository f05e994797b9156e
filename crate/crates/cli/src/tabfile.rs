//! Custom tableau files: JSON with fields {name, r, a (row-major, r x r),
//! b, c}. Loading runs the validator and returns violations as warnings, not
//! failures; saving round-trips every coefficient exactly.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rkflow_core::tableau::{validate_tableau, ButcherTableau, Violation};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableauFile {
    name: String,
    r: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

pub fn load_tableau(path: &Path) -> Result<(ButcherTableau, Vec<Violation>)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading tableau file {}", path.display()))?;
    let file: TableauFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing tableau file {}", path.display()))?;
    if file.r == 0 {
        bail!("tableau '{}': stage count r must be >= 1", file.name);
    }
    if file.a.len() != file.r * file.r {
        bail!(
            "tableau '{}': a has {} entries, expected r*r = {}",
            file.name,
            file.a.len(),
            file.r * file.r
        );
    }
    if file.b.len() != file.r {
        bail!("tableau '{}': b has {} weights, expected r = {}", file.name, file.b.len(), file.r);
    }
    if file.c.len() != file.r {
        bail!("tableau '{}': c has {} nodes, expected r = {}", file.name, file.c.len(), file.r);
    }
    let rows: Vec<Vec<f64>> = file.a.chunks(file.r).map(|row| row.to_vec()).collect();
    let tableau = ButcherTableau::new(file.name, rows, file.b, file.c)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let warnings = validate_tableau(&tableau);
    Ok((tableau, warnings))
}

pub fn save_tableau(tableau: &ButcherTableau, path: &Path) -> Result<()> {
    let file = TableauFile {
        name: tableau.name().to_string(),
        r: tableau.r(),
        a: tableau.a_rows().iter().flatten().copied().collect(),
        b: tableau.b().to_vec(),
        c: tableau.c().to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).context("serializing tableau")?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing tableau file {}", path.display()))?;
    Ok(())
}

/// Resolve a tableau argument: registry name first, file path second.
pub fn resolve_tableau(spec: &str) -> Result<(ButcherTableau, Vec<Violation>)> {
    match rkflow_core::tableau::registry_get(spec) {
        Ok(t) => Ok((t, Vec::new())),
        Err(name_err) => {
            let path = Path::new(spec);
            if path.exists() {
                load_tableau(path)
            } else {
                bail!("{name_err}; and no file named '{spec}' exists")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rkflow_core::tableau::registry_get;

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for name in rkflow_core::tableau::REGISTRY_NAMES {
            let t = registry_get(name).unwrap();
            let path = dir.path().join(format!("{name}.json"));
            save_tableau(&t, &path).unwrap();
            let (loaded, warnings) = load_tableau(&path).unwrap();
            assert_eq!(loaded, t, "{name}");
            assert!(warnings.is_empty(), "{name}");
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"name":"bad","r":2,"a":[0,0,1,0],"b":[0.5,0.25,0.25],"c":[0,1]}"#,
        )
        .unwrap();
        let err = load_tableau(&path).unwrap_err();
        assert!(err.to_string().contains("3 weights"));
    }

    #[test]
    fn invalid_coefficients_load_with_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("warn.json");
        std::fs::write(
            &path,
            r#"{"name":"warn","r":2,"a":[0,0,1,0],"b":[0.6,0.6],"c":[0,1]}"#,
        )
        .unwrap();
        let (t, warnings) = load_tableau(&path).unwrap();
        assert_eq!(t.r(), 2);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].what.contains("weight sum"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.json");
        std::fs::write(
            &path,
            r#"{"name":"x","r":1,"a":[0],"b":[1],"c":[0],"order":1}"#,
        )
        .unwrap();
        assert!(load_tableau(&path).is_err());
    }

    #[test]
    fn resolver_prefers_registry_names() {
        let (t, w) = resolve_tableau("heun2").unwrap();
        assert_eq!(t.name(), "heun2");
        assert!(w.is_empty());
        assert!(resolve_tableau("definitely_not_a_tableau").is_err());
    }
}
