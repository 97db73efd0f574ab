//! Line-oriented annotation files: `image_name<TAB>identity<TAB>bitstring`,
//! UTF-8 with LF line endings. An identity of `-` (or empty) means the
//! sample carries none.

use std::collections::HashSet;
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

/// Itemized outcome of an ingestion pass.
#[derive(Debug, Clone, Default)]
pub struct IngestionReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl IngestionReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

fn parse_line(line: &str, lineno: usize, expected_n: Option<usize>) -> Result<Sample> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 3 {
        return Err(Error::Data(format!(
            "line {lineno}: expected 3 tab-separated columns, got {}",
            cols.len()
        )));
    }
    let image_name = cols[0].trim();
    if image_name.is_empty() {
        return Err(Error::Data(format!("line {lineno}: empty image name")));
    }
    let identity = match cols[1].trim() {
        "" | "-" => None,
        id => Some(id.to_string()),
    };
    let bits = cols[2].trim();
    let mut labels = Vec::with_capacity(bits.len());
    for ch in bits.chars() {
        match ch {
            '0' => labels.push(0),
            '1' => labels.push(1),
            other => {
                return Err(Error::Data(format!(
                    "line {lineno} ({image_name}): label character {other:?} is not 0/1"
                )))
            }
        }
    }
    if let Some(n) = expected_n {
        if labels.len() != n {
            return Err(Error::Data(format!(
                "line {lineno} ({image_name}): {} labels, expected {n}",
                labels.len()
            )));
        }
    }
    Ok(Sample {
        image_name: image_name.to_string(),
        identity,
        labels,
    })
}

/// Load an annotation file and verify referenced images exist under
/// `images_root`. With `fail_fast` the first problem aborts; otherwise
/// offending rows are skipped and itemized in the report.
pub fn load_dataset(
    annotation_path: &Path,
    images_root: &Path,
    fail_fast: bool,
) -> Result<(Dataset, IngestionReport)> {
    let text = std::fs::read_to_string(annotation_path).map_err(|e| Error::Ingestion {
        path: annotation_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut report = IngestionReport::default();
    let mut samples: Vec<Sample> = Vec::new();
    let mut seen_names: HashSet<String> = HashSet::new();
    let mut n: Option<usize> = None;

    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let sample = match parse_line(line, i + 1, n) {
            Ok(s) => s,
            Err(e) => {
                if fail_fast {
                    return Err(e);
                }
                report.errors.push(e.to_string());
                continue;
            }
        };
        if n.is_none() {
            n = Some(sample.labels.len());
        }
        let image_path = images_root.join(&sample.image_name);
        if !image_path.is_file() {
            let e = Error::Ingestion {
                path: image_path,
                message: "referenced image not found".to_string(),
            };
            if fail_fast {
                return Err(e);
            }
            report.errors.push(e.to_string());
            continue;
        }
        if !seen_names.insert(sample.image_name.clone()) {
            report.warnings.push(format!(
                "duplicate image name {:?} (both records kept)",
                sample.image_name
            ));
        }
        samples.push(sample);
    }

    let Some(n) = n.filter(|_| !samples.is_empty()) else {
        return Err(Error::Data(format!(
            "annotation file {} yielded no valid samples",
            annotation_path.display()
        )));
    };
    Ok((
        Dataset {
            root: images_root.to_path_buf(),
            samples,
            n_attributes: n,
        },
        report,
    ))
}

/// Inverse of [`load_dataset`]'s parser.
pub fn write_annotations(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let identity = s.identity.as_deref().unwrap_or("-");
        let bits: String = s.labels.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect();
        out.push_str(&format!("{}\t{}\t{}\n", s.image_name, identity, bits));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageTensor;

    fn make_images(dir: &Path, names: &[&str]) {
        for name in names {
            ImageTensor::zeros(4, 4).save_png(&dir.join(name)).unwrap();
        }
    }

    #[test]
    fn three_line_file_loads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        make_images(dir.path(), &["a.png", "b.png", "c.png"]);
        let ann = dir.path().join("ann.tsv");
        std::fs::write(&ann, "a.png\tid1\t101\nb.png\t-\t011\nc.png\tid2\t000\n").unwrap();
        let (ds, report) = load_dataset(&ann, dir.path(), true).unwrap();
        assert!(report.is_clean());
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_attributes, 3);
        assert_eq!(ds.samples[0].image_name, "a.png");
        assert_eq!(ds.samples[1].identity, None);
        assert_eq!(ds.samples[2].labels, vec![0, 0, 0]);
    }

    #[test]
    fn width_mismatch_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        make_images(dir.path(), &["a.png", "b.png"]);
        let ann = dir.path().join("ann.tsv");
        std::fs::write(&ann, "a.png\tid1\t101\nb.png\tid2\t01\n").unwrap();
        let err = load_dataset(&ann, dir.path(), true).unwrap_err();
        assert!(err.to_string().contains("b.png"), "{err}");

        let (ds, report) = load_dataset(&ann, dir.path(), false).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(report.errors.len(), 1);
    }

    #[test]
    fn missing_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        make_images(dir.path(), &["a.png"]);
        let ann = dir.path().join("ann.tsv");
        std::fs::write(&ann, "a.png\tid1\t1\nmissing.png\tid2\t0\n").unwrap();
        let (ds, report) = load_dataset(&ann, dir.path(), false).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(report.errors[0].contains("missing.png"));
    }

    #[test]
    fn duplicates_warn_but_are_kept() {
        let dir = tempfile::tempdir().unwrap();
        make_images(dir.path(), &["a.png"]);
        let ann = dir.path().join("ann.tsv");
        std::fs::write(&ann, "a.png\tid1\t1\na.png\tid1\t0\n").unwrap();
        let (ds, report) = load_dataset(&ann, dir.path(), false).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn roundtrip_preserves_samples() {
        let dir = tempfile::tempdir().unwrap();
        make_images(dir.path(), &["x.png", "y.png"]);
        let samples = vec![
            Sample {
                image_name: "x.png".into(),
                identity: Some("p1".into()),
                labels: vec![1, 0, 1],
            },
            Sample {
                image_name: "y.png".into(),
                identity: None,
                labels: vec![0, 1, 1],
            },
        ];
        let ann = dir.path().join("ann.tsv");
        write_annotations(&ann, &samples).unwrap();
        let (ds, _) = load_dataset(&ann, dir.path(), true).unwrap();
        assert_eq!(ds.samples, samples);
    }
}
