//! In-memory view of a documentation package (directory or zip archive).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use super::{ImageCaptioner, ImageRef, IngestError, OcrEngine};
use crate::error::BackendError;

const MANIFEST_NAME: &str = "nodetree.xml";

/// Package files keyed by `/`-separated relative path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Package {
    files: BTreeMap<String, Vec<u8>>,
}

impl Package {
    /// Load a directory tree or a `.zip` archive.
    pub fn open(path: &Path) -> Result<Self, IngestError> {
        if path.is_dir() {
            Self::from_dir(path)
        } else {
            Self::from_zip(path)
        }
    }

    pub fn from_dir(root: &Path) -> Result<Self, IngestError> {
        let mut pkg = Self::default();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).expect("walked below root");
                    let key = rel
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy())
                        .collect::<Vec<_>>()
                        .join("/");
                    pkg.files.insert(key, std::fs::read(&path)?);
                }
            }
        }
        Ok(pkg)
    }

    pub fn from_zip(path: &Path) -> Result<Self, IngestError> {
        let file = std::fs::File::open(path)?;
        let mut archive =
            zip::ZipArchive::new(file).map_err(|e| IngestError::Archive(e.to_string()))?;
        let mut pkg = Self::default();
        for i in 0..archive.len() {
            let mut entry = archive
                .by_index(i)
                .map_err(|e| IngestError::Archive(e.to_string()))?;
            if entry.is_dir() {
                continue;
            }
            let Some(name) = entry.enclosed_name() else {
                continue;
            };
            let key = name
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            let mut bytes = Vec::with_capacity(entry.size() as usize);
            entry.read_to_end(&mut bytes)?;
            pkg.files.insert(key, bytes);
        }
        Ok(pkg)
    }

    pub fn insert(&mut self, path: &str, text: &str) {
        self.insert_bytes(path, text.as_bytes().to_vec());
    }

    pub fn insert_bytes(&mut self, path: &str, bytes: Vec<u8>) {
        self.files.insert(path.to_string(), bytes);
    }

    pub fn get(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    /// The shallowest `nodetree.xml` (case-insensitive), ties broken by path.
    pub fn manifest(&self) -> Option<(&str, &[u8])> {
        self.files
            .iter()
            .filter(|(k, _)| {
                k.rsplit('/')
                    .next()
                    .is_some_and(|name| name.eq_ignore_ascii_case(MANIFEST_NAME))
            })
            .min_by_key(|(k, _)| (k.matches('/').count(), k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

/// OCR and captioning backed by text files stored next to each image in the
/// package: `<image>.ocr.txt` and `<image>.caption.txt`.
pub struct SidecarText<'a> {
    package: &'a Package,
}

impl<'a> SidecarText<'a> {
    pub fn new(package: &'a Package) -> Self {
        Self { package }
    }

    fn read(&self, image: &ImageRef, suffix: &str) -> Result<String, BackendError> {
        let path = format!("{}.{suffix}.txt", image.image_path);
        let bytes = self
            .package
            .get(&path)
            .ok_or_else(|| BackendError::Unavailable(format!("no sidecar {path}")))?;
        String::from_utf8(bytes.to_vec())
            .map(|s| s.trim().to_string())
            .map_err(|e| BackendError::Failed(format!("{path}: {e}")))
    }
}

impl OcrEngine for SidecarText<'_> {
    fn extract_text(&self, image: &ImageRef) -> Result<String, BackendError> {
        self.read(image, "ocr")
    }
}

impl ImageCaptioner for SidecarText<'_> {
    fn caption(&self, image: &ImageRef, _prompt: &str) -> Result<String, BackendError> {
        self.read(image, "caption")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn manifest_prefers_shallowest() {
        let mut p = Package::default();
        p.insert("a/b/nodetree.xml", "<x/>");
        p.insert("z/NodeTree.XML", "<y/>");
        p.insert("nodetree.xml.bak", "");
        assert_eq!(p.manifest().unwrap().0, "z/NodeTree.XML");
        assert!(Package::default().manifest().is_none());
    }

    #[test]
    fn dir_and_zip_agree() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("pkg/docs")).unwrap();
        std::fs::write(dir.path().join("pkg/nodetree.xml"), "<t/>").unwrap();
        std::fs::write(dir.path().join("pkg/docs/a.html"), "<p>a</p>").unwrap();
        let from_dir = Package::open(dir.path()).unwrap();

        let zip_path = dir.path().join("pkg.zip");
        let mut zw = zip::ZipWriter::new(std::fs::File::create(&zip_path).unwrap());
        let opts = zip::write::SimpleFileOptions::default();
        zw.add_directory("pkg/", opts).unwrap();
        zw.start_file("pkg/nodetree.xml", opts).unwrap();
        zw.write_all(b"<t/>").unwrap();
        zw.start_file("pkg/docs/a.html", opts).unwrap();
        zw.write_all(b"<p>a</p>").unwrap();
        zw.finish().unwrap();
        let from_zip = Package::open(&zip_path).unwrap();

        assert_eq!(from_zip, from_dir);
        assert_eq!(from_zip.len(), 2);
    }

    #[test]
    fn corrupt_zip_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.zip");
        std::fs::write(&p, b"not a zip").unwrap();
        assert!(matches!(Package::open(&p), Err(IngestError::Archive(_))));
    }
}
