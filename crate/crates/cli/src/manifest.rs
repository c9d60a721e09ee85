//! Evaluation manifests: one pair per line, `source.bin target.bin` followed
//! by the 12 row-major numbers of the ground-truth source-to-target pose.
//! Relative paths resolve against the manifest's directory; `#` starts a
//! comment.

use std::path::{Path, PathBuf};

use rdm_core::datakit::{format_poses, parse_poses};
use rdm_core::geometry::RigidTransform;
use rdm_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub gt: RigidTransform,
    /// 1-based line in the manifest.
    pub line: usize,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 14 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 2 paths and 12 numbers, found {} fields", tokens.len()),
            });
        }
        let gt = match parse_poses(&tokens[2..].join(" "), path) {
            Ok(list) => list.poses[0],
            Err(Error::Parse { message, .. }) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message,
                })
            }
            Err(e) => return Err(e),
        };
        out.push(ManifestEntry {
            source: base.join(tokens[0]),
            target: base.join(tokens[1]),
            gt,
            line: i + 1,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_manifest(&text, path)
}

pub fn manifest_line(source: &str, target: &str, gt: &RigidTransform) -> String {
    format!("{source} {target} {}", format_poses(&[*gt]).trim_end())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rdm_core::nalgebra::Vector3;

    #[test]
    fn lines_round_trip_and_resolve_paths() {
        let gt = RigidTransform::yaw(0.3, Vector3::new(1.0, -2.0, 0.5));
        let text = format!("# pairs\n\n{}\n", manifest_line("a.bin", "b.bin", &gt));
        let entries = parse_manifest(&text, Path::new("/data/m.txt")).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].source, PathBuf::from("/data/a.bin"));
        assert_eq!(entries[0].target, PathBuf::from("/data/b.bin"));
        assert_eq!(entries[0].gt, gt);
        assert_eq!(entries[0].line, 3);
    }

    #[test]
    fn malformed_lines_name_their_line() {
        let bad = "a.bin b.bin 1 0 0 0 0 1 0 0 0 0 1\n";
        assert!(matches!(parse_manifest(bad, Path::new("m")), Err(Error::Parse { line: 1, .. })));
        let bad = "x y 1 0 0 0 0 1 0 0 0 0 1 0\nx y 1 0 0 0 0 1 0 0 0 0 one 0\n";
        match parse_manifest(bad, Path::new("m")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("one"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn any_yaw_pose_survives_a_manifest(yaw in -3.2f64..3.2, x in -1e3f64..1e3, y in -1e3f64..1e3, z in -50f64..50.0, rows in 1usize..6) {
            let gt = RigidTransform::yaw(yaw, Vector3::new(x, y, z));
            let text: Vec<String> = (0..rows).map(|i| manifest_line(&format!("s{i}.bin"), &format!("t{i}.bin"), &gt)).collect();
            let entries = parse_manifest(&text.join("\n"), Path::new("m.txt")).unwrap();
            proptest::prop_assert_eq!(entries.len(), rows);
            for (i, e) in entries.iter().enumerate() {
                proptest::prop_assert_eq!(e.gt, gt);
                proptest::prop_assert_eq!(e.line, i + 1);
                proptest::prop_assert_eq!(&e.source, &PathBuf::from(format!("s{i}.bin")));
            }
        }
    }

    #[test]
    fn empty_manifest_has_no_entries() {
        assert!(parse_manifest("# nothing\n", Path::new("m")).unwrap().is_empty());
    }
}
