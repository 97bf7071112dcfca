use std::path::Path;

use super::{DatasetSplit, ImagePair, ImageSource, SplitRole};
use crate::error::{Error, Result};

/// Reads a CVUSA-style list of `aerial_path,ground_path` rows (extra columns
/// are ignored) with paths relative to `root`. Rows keep their file order;
/// ids are `{row:06}_{ground file stem}`. Images are loaded lazily, but every
/// referenced file must exist.
pub fn load_cvusa_style(root: &Path, list_file: &Path, role: SplitRole) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(list_file).map_err(|e| Error::io(list_file, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (Some(aerial), Some(ground)) = (cols.next(), cols.next()) else {
            return Err(Error::Row {
                row,
                message: "expected `aerial_path,ground_path`".into(),
            });
        };
        let aerial_path = root.join(aerial);
        let ground_path = root.join(ground);
        for path in [&aerial_path, &ground_path] {
            if !path.is_file() {
                return Err(Error::Row {
                    row,
                    message: format!("missing file {}", path.display()),
                });
            }
        }
        let stem = ground_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        pairs.push(ImagePair {
            id: format!("{row:06}_{stem}"),
            ground: ImageSource::File(ground_path),
            aerial: ImageSource::File(aerial_path),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{} lists no image pairs", list_file.display())));
    }
    DatasetSplit::new(pairs, role)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;

    fn fixture(rows: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("bingmap")).unwrap();
        std::fs::create_dir_all(dir.path().join("streetview")).unwrap();
        for name in ["a", "b", "c"] {
            Image::filled(4, 4, [0.5; 3])
                .save_png(&dir.path().join(format!("bingmap/{name}.png")))
                .unwrap();
            Image::filled(2, 6, [0.1; 3])
                .save_png(&dir.path().join(format!("streetview/{name}.png")))
                .unwrap();
        }
        let list = dir.path().join("list.csv");
        std::fs::write(&list, rows.join("\n")).unwrap();
        (dir, list)
    }

    #[test]
    fn preserves_order() {
        let (dir, list) = fixture(&[
            "bingmap/c.png,streetview/c.png,ignored",
            "bingmap/a.png,streetview/a.png",
            "bingmap/b.png,streetview/b.png",
        ]);
        let split = load_cvusa_style(dir.path(), &list, SplitRole::Train).unwrap();
        let ids: Vec<&str> = split.pairs().iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["000001_c", "000002_a", "000003_b"]);
        let img = split.pairs()[0].aerial.load().unwrap();
        assert_eq!((img.height(), img.width()), (4, 4));
    }

    #[test]
    fn missing_file_names_row() {
        let (dir, list) = fixture(&["bingmap/a.png,streetview/a.png", "bingmap/zz.png,streetview/b.png"]);
        match load_cvusa_style(dir.path(), &list, SplitRole::Train) {
            Err(Error::Row { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("zz.png"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_list_is_an_error() {
        let (dir, list) = fixture(&[""]);
        assert!(load_cvusa_style(dir.path(), &list, SplitRole::Train).is_err());
    }

    #[test]
    fn malformed_row() {
        let (dir, list) = fixture(&["bingmap/a.png"]);
        assert!(matches!(
            load_cvusa_style(dir.path(), &list, SplitRole::Train),
            Err(Error::Row { row: 1, .. })
        ));
    }
}
