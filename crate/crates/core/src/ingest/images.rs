//! Rule-based image filtering and the OCR / captioning interfaces.

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ImageRef, IngestWarning};
use crate::error::{BackendError, ConfigError};
use crate::tokenize::is_cjk;

pub const DEFAULT_CAPTION_PROMPT: &str = "简要描述图片";
pub const DEFAULT_CAPTION_PROMPT_EN: &str = "Briefly describe the image";

/// How one filter rule takes part in the keep decision: `required` rules
/// must all pass, and at least one `any_of` rule must pass when any are
/// active.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMode {
    #[default]
    Off,
    Required,
    AnyOf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChineseTextRule {
    pub mode: RuleMode,
}

impl Default for ChineseTextRule {
    fn default() -> Self {
        Self {
            mode: RuleMode::Required,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TitleKeywordRule {
    pub mode: RuleMode,
    pub keywords: Vec<String>,
}

impl Default for TitleKeywordRule {
    fn default() -> Self {
        Self {
            mode: RuleMode::AnyOf,
            keywords: ["组网图", "架构", "拓扑", "network diagram", "architecture", "topology"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferencePatternRule {
    pub mode: RuleMode,
    /// Regular expressions matched against the sentence referencing the image.
    pub patterns: Vec<String>,
}

impl Default for ReferencePatternRule {
    fn default() -> Self {
        Self {
            mode: RuleMode::AnyOf,
            patterns: [
                r"(配置|文件)如图\s*\d+\s*所示",
                r"(?i)(configuration|file)s? (is |are )?as shown in figure\s*\d+",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

/// Image filter configuration. The default keeps an image iff its OCR text
/// contains Chinese AND (its title has a keyword OR its referencing sentence
/// matches a pattern). Keyword and pattern lists are examples; tune per
/// corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageFilterConfig {
    pub chinese_text: ChineseTextRule,
    pub title_keywords: TitleKeywordRule,
    pub reference_patterns: ReferencePatternRule,
}

impl ImageFilterConfig {
    /// Every rule off: the filter keeps everything.
    pub fn disabled() -> Self {
        Self {
            chinese_text: ChineseTextRule { mode: RuleMode::Off },
            title_keywords: TitleKeywordRule {
                mode: RuleMode::Off,
                keywords: vec![],
            },
            reference_patterns: ReferencePatternRule {
                mode: RuleMode::Off,
                patterns: vec![],
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(format!("image rules: {e}")))
    }
}

/// Compiled form of [`ImageFilterConfig`].
#[derive(Debug, Clone)]
pub struct ImageFilter {
    config: ImageFilterConfig,
    patterns: Vec<Regex>,
}

impl Default for ImageFilter {
    fn default() -> Self {
        Self::new(ImageFilterConfig::default()).expect("default patterns compile")
    }
}

fn contains_cjk(text: &str) -> bool {
    text.chars().any(is_cjk)
}

impl ImageFilter {
    pub fn new(config: ImageFilterConfig) -> Result<Self, ConfigError> {
        let patterns = config
            .reference_patterns
            .patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| ConfigError::Invalid(format!("pattern {p:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        Ok(Self { config, patterns })
    }

    pub fn config(&self) -> &ImageFilterConfig {
        &self.config
    }

    /// Outcome of each rule for one image; `None` when the rule is off or
    /// cannot be evaluated (no OCR text).
    fn verdicts(&self, image: &ImageRef) -> [(RuleMode, Option<bool>); 3] {
        let c = &self.config;
        let chinese = image.extracted_text.as_deref().map(contains_cjk);
        let title = c
            .title_keywords
            .keywords
            .iter()
            .any(|k| !k.is_empty() && image.title.to_lowercase().contains(&k.to_lowercase()));
        let reference = self
            .patterns
            .iter()
            .any(|p| p.is_match(&image.reference_context));
        [
            (c.chinese_text.mode, chinese),
            (c.title_keywords.mode, Some(title)),
            (c.reference_patterns.mode, Some(reference)),
        ]
    }

    pub fn keeps(&self, image: &ImageRef) -> bool {
        let verdicts = self.verdicts(image);
        let required_ok = verdicts
            .iter()
            .filter(|(m, _)| *m == RuleMode::Required)
            .all(|(_, v)| v.unwrap_or(true));
        let any_of: Vec<bool> = verdicts
            .iter()
            .filter(|(m, _)| *m == RuleMode::AnyOf)
            .filter_map(|(_, v)| *v)
            .collect();
        required_ok && (any_of.is_empty() || any_of.contains(&true))
    }
}

pub fn filter_images(images: Vec<ImageRef>, filter: &ImageFilter) -> Vec<ImageRef> {
    images.into_iter().filter(|i| filter.keeps(i)).collect()
}

/// Extracts text printed inside an image.
pub trait OcrEngine: Send + Sync {
    fn extract_text(&self, image: &ImageRef) -> Result<String, BackendError>;
}

/// Produces a short natural-language description of an image.
pub trait ImageCaptioner: Send + Sync {
    fn caption(&self, image: &ImageRef, prompt: &str) -> Result<String, BackendError>;
}

/// Fill `extracted_text`; failures leave it absent and add a warning.
pub fn ocr_images(
    images: Vec<ImageRef>,
    engine: &dyn OcrEngine,
    file: &str,
) -> (Vec<ImageRef>, Vec<IngestWarning>) {
    let results: Vec<(ImageRef, Option<IngestWarning>)> = images
        .into_par_iter()
        .map(|mut img| match engine.extract_text(&img) {
            Ok(text) => {
                img.extracted_text = Some(text);
                (img, None)
            }
            Err(e) => {
                let w = IngestWarning::new(file, format!("ocr failed for {}: {e}", img.image_path));
                (img, Some(w))
            }
        })
        .collect();
    split_warnings(results)
}

/// Caption every image with `prompt`; failures leave the caption empty and
/// add a warning.
pub fn caption_images(
    images: Vec<ImageRef>,
    captioner: &dyn ImageCaptioner,
    prompt: &str,
    file: &str,
) -> (Vec<ImageRef>, Vec<IngestWarning>) {
    let results: Vec<(ImageRef, Option<IngestWarning>)> = images
        .into_par_iter()
        .map(|mut img| match captioner.caption(&img, prompt) {
            Ok(caption) => {
                img.caption = Some(caption);
                (img, None)
            }
            Err(e) => {
                img.caption = Some(String::new());
                let w = IngestWarning::new(file, format!("caption failed for {}: {e}", img.image_path));
                (img, Some(w))
            }
        })
        .collect();
    split_warnings(results)
}

fn split_warnings(results: Vec<(ImageRef, Option<IngestWarning>)>) -> (Vec<ImageRef>, Vec<IngestWarning>) {
    let mut images = Vec::with_capacity(results.len());
    let mut warnings = Vec::new();
    for (img, w) in results {
        images.push(img);
        warnings.extend(w);
    }
    (images, warnings)
}

/// Captioner that returns the image title; a stand-in when no multimodal
/// model is configured.
#[derive(Debug, Clone, Copy, Default)]
pub struct TitleCaptioner;

impl ImageCaptioner for TitleCaptioner {
    fn caption(&self, image: &ImageRef, _prompt: &str) -> Result<String, BackendError> {
        Ok(image.title.clone())
    }
}
