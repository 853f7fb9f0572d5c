use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::{read_image, DataError, ImagePairRecord, Label, Split};

pub const MANIFEST_HEADER: [&str; 7] = ["subject_id", "pair_id", "t0_path", "t1_path", "label", "has_nodule", "split"];

/// A validated manifest row. Image paths are resolved against the manifest
/// directory; pixels are read on [`ManifestEntry::load`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub pair_id: String,
    pub t0_path: PathBuf,
    pub t1_path: PathBuf,
    pub label: Label,
    pub has_nodule: bool,
    pub split: Split,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<ImagePairRecord, DataError> {
        Ok(ImagePairRecord {
            subject_id: self.subject_id.clone(),
            pair_id: self.pair_id.clone(),
            x0: read_image(&self.t0_path)?,
            x1: read_image(&self.t1_path)?,
            label: self.label,
            has_nodule: self.has_nodule,
            split: self.split,
        })
    }
}

/// Writes rows with paths relative to `path`'s directory when possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let csv_err = |source| DataError::Csv { path: path.to_path_buf(), source };
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for e in entries {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        w.write_record([
            e.subject_id.as_str(),
            e.pair_id.as_str(),
            &rel(&e.t0_path),
            &rel(&e.t1_path),
            e.label.as_str(),
            if e.has_nodule { "true" } else { "false" },
            e.split.as_str(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let csv_err = |source| DataError::Csv { path: path.to_path_buf(), source };
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(DataError::Header {
            path: path.to_path_buf(),
            expected: MANIFEST_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }

    let mut out = Vec::new();
    let mut seen: HashMap<String, Split> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |message: String| DataError::Row { path: path.to_path_buf(), line, message };
        let label: Label = row[4].parse().map_err(bad)?;
        let has_nodule = match &row[5] {
            "true" => true,
            "false" => false,
            other => return Err(bad(format!("has_nodule must be true or false, got `{other}`"))),
        };
        let split: Split = row[6].parse().map_err(bad)?;
        if (label == Label::None) == has_nodule {
            return Err(DataError::Invariant {
                path: path.to_path_buf(),
                line,
                message: format!("label {label} with has_nodule {has_nodule}"),
            });
        }
        let subject_id = row[0].to_string();
        match seen.get(&subject_id) {
            Some(&first) if first != split => {
                return Err(DataError::SplitLeak { subject: subject_id, first, second: split });
            }
            _ => {
                seen.insert(subject_id.clone(), split);
            }
        }
        let t0_path = base.join(&row[2]);
        let t1_path = base.join(&row[3]);
        for p in [&t0_path, &t1_path] {
            if !p.is_file() {
                return Err(DataError::MissingFile(p.clone()));
            }
        }
        out.push(ManifestEntry { subject_id, pair_id: row[1].to_string(), t0_path, t1_path, label, has_nodule, split });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.csv");
        fs::write(&p, format!("{}\n{body}", MANIFEST_HEADER.join(","))).unwrap();
        p
    }

    #[test]
    fn empty_body_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_manifest(&write(dir.path(), "")).unwrap().is_empty());
    }

    #[test]
    fn malignant_without_nodule_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s1,p1,a.cfni,b.cfni,malignant,false,train\n");
        let err = load_manifest(&p).unwrap_err();
        assert!(matches!(err, DataError::Invariant { line: 2, .. }), "{err}");
    }

    #[test]
    fn structural_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = crate::tensor::Array::zeros(&[2, 2]);
        super::super::write_image(&img, &dir.path().join("a.cfni")).unwrap();

        let p = write(dir.path(), "s1,p1,a.cfni,a.cfni,cancer,true,train\n");
        assert!(load_manifest(&p).unwrap_err().to_string().contains("unknown label"));

        let p = write(dir.path(), "s1,p1,a.cfni,a.cfni,benign,true,train\ns1,p2,a.cfni,a.cfni,benign,true,test\n");
        assert!(matches!(load_manifest(&p).unwrap_err(), DataError::SplitLeak { .. }));

        let p = write(dir.path(), "s1,p1,a.cfni,gone.cfni,benign,true,train\n");
        assert!(matches!(load_manifest(&p).unwrap_err(), DataError::MissingFile(f) if f.ends_with("gone.cfni")));

        fs::write(&p, "subject,pair\n").unwrap();
        assert!(matches!(load_manifest(&p).unwrap_err(), DataError::Header { .. }));
    }

    #[test]
    fn write_and_load_agree() {
        let dir = tempfile::tempdir().unwrap();
        let img = crate::tensor::Array::full(&[3, 3], 0.25);
        let (a, b) = (dir.path().join("a.cfni"), dir.path().join("b.cfni"));
        super::super::write_image(&img, &a).unwrap();
        super::super::write_image(&img, &b).unwrap();
        let entry = ManifestEntry {
            subject_id: "s9".into(),
            pair_id: "s9-t0t1".into(),
            t0_path: a,
            t1_path: b,
            label: Label::None,
            has_nodule: false,
            split: Split::Val,
        };
        let p = dir.path().join("m.csv");
        write_manifest(&p, std::slice::from_ref(&entry)).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("s9,s9-t0t1,a.cfni,b.cfni,none,false,val"));
        let back = load_manifest(&p).unwrap();
        assert_eq!(back, vec![entry]);
        assert_eq!(back[0].load().unwrap().x1, img);
    }
}
