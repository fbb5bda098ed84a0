//! Node-tree manifest parsing.
//!
//! The manifest is an XML tree of named nodes. A node's title is read from
//! its `title`, `name` or `label` attribute and its content file from `file`,
//! `url`, `href`, `path` or `src`. The document element itself is a container
//! and contributes no path segment unless it carries a title.

use serde::{Deserialize, Serialize};

use super::IngestError;

const TITLE_ATTRS: &[&str] = &["title", "name", "label"];
const FILE_ATTRS: &[&str] = &["file", "url", "href", "path", "src"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub knowledge_path: String,
    pub file_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeWarning {
    /// Knowledge path of the offending node, as far as it is known.
    pub node: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeTree {
    pub entries: Vec<NodeEntry>,
    pub warnings: Vec<NodeWarning>,
}

fn first_attr<'a>(node: roxmltree::Node<'a, '_>, names: &[&str]) -> Option<&'a str> {
    names
        .iter()
        .find_map(|n| node.attribute(*n))
        .map(str::trim)
        .filter(|v| !v.is_empty())
}

fn byte_offset(text: &str, pos: roxmltree::TextPos) -> usize {
    let mut offset = 0;
    for (row, line) in text.split_inclusive('\n').enumerate() {
        if row + 1 == pos.row as usize {
            return offset
                + line
                    .chars()
                    .take(pos.col.saturating_sub(1) as usize)
                    .map(char::len_utf8)
                    .sum::<usize>();
        }
        offset += line.len();
    }
    text.len()
}

/// Parse a manifest into `(knowledge_path, file_path)` entries in document
/// order. Every node naming a content file yields an entry; leaves without a
/// file are skipped with a warning.
pub fn parse_node_tree(manifest: &[u8]) -> Result<NodeTree, IngestError> {
    let text = std::str::from_utf8(manifest).map_err(|e| IngestError::Manifest {
        offset: e.valid_up_to(),
        message: "manifest is not valid UTF-8".into(),
    })?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let doc = roxmltree::Document::parse(text).map_err(|e| IngestError::Manifest {
        offset: byte_offset(text, e.pos()),
        message: e.to_string(),
    })?;

    let mut tree = NodeTree::default();
    let mut path: Vec<String> = Vec::new();
    let root = doc.root_element();
    if let Some(title) = first_attr(root, TITLE_ATTRS) {
        path.push(title.to_string());
    }
    for child in root.children().filter(|n| n.is_element()) {
        walk(child, &mut path, &mut tree);
    }
    Ok(tree)
}

fn walk(node: roxmltree::Node<'_, '_>, path: &mut Vec<String>, tree: &mut NodeTree) {
    let title = first_attr(node, TITLE_ATTRS);
    let file = first_attr(node, FILE_ATTRS);
    let pushed = match (title, file) {
        (Some(t), _) => {
            path.push(t.replace('/', "-"));
            true
        }
        // untitled node with a file: name it after the file stem
        (None, Some(f)) => {
            let stem = f.rsplit('/').next().unwrap_or(f);
            let stem = stem.split('.').next().unwrap_or(stem);
            path.push(stem.to_string());
            true
        }
        (None, None) => false,
    };
    let is_leaf = !node.children().any(|n| n.is_element());
    match file {
        Some(f) => tree.entries.push(NodeEntry {
            knowledge_path: path.join("/"),
            file_path: f.to_string(),
        }),
        None if is_leaf => tree.warnings.push(NodeWarning {
            node: if path.is_empty() {
                format!("<{}>", node.tag_name().name())
            } else {
                path.join("/")
            },
            message: "leaf node without a file attribute skipped".into(),
        }),
        None => {}
    }
    for child in node.children().filter(|n| n.is_element()) {
        walk(child, path, tree);
    }
    if pushed {
        path.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_tree() {
        let tree = parse_node_tree(b"<nodetree/>").unwrap();
        assert!(tree.entries.is_empty());
        assert!(tree.warnings.is_empty());
    }

    #[test]
    fn two_node_manifest() {
        let xml = br#"<nodetree><node title="A"><node title="B" file="x.html"/></node></nodetree>"#;
        let tree = parse_node_tree(xml).unwrap();
        assert_eq!(
            tree.entries,
            vec![NodeEntry {
                knowledge_path: "A/B".into(),
                file_path: "x.html".into()
            }]
        );
    }

    #[test]
    fn siblings_in_document_order() {
        let xml = r#"<nodetree>
            <node name="网络">
              <node name="告警" url="b/alarm.html"/>
              <node name="配置" url="a/config.html"/>
            </node>
        </nodetree>"#;
        let tree = parse_node_tree(xml.as_bytes()).unwrap();
        let got: Vec<(&str, &str)> = tree
            .entries
            .iter()
            .map(|e| (e.knowledge_path.as_str(), e.file_path.as_str()))
            .collect();
        assert_eq!(got, vec![("网络/告警", "b/alarm.html"), ("网络/配置", "a/config.html")]);
    }

    #[test]
    fn leaf_without_file_is_skipped_with_warning() {
        let xml = br#"<t><node title="A"><node title="B"/><node title="C" file="c.html"/></node></t>"#;
        let tree = parse_node_tree(xml).unwrap();
        assert_eq!(tree.entries.len(), 1);
        assert_eq!(tree.entries[0].knowledge_path, "A/C");
        assert_eq!(tree.warnings.len(), 1);
        assert_eq!(tree.warnings[0].node, "A/B");
    }

    #[test]
    fn malformed_xml_reports_byte_offset() {
        let xml = "<a>\n<b title=\"x\">\n</a>";
        match parse_node_tree(xml.as_bytes()) {
            Err(IngestError::Manifest { offset, .. }) => {
                assert!(offset > 4 && offset <= xml.len(), "offset {offset}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
        assert!(matches!(
            parse_node_tree(&[0x3c, 0xff, 0xfe]),
            Err(IngestError::Manifest { offset: 1, .. })
        ));
    }
}
