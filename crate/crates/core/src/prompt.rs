//! Prompt templates, class lists, and their composition into classifier text.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{}";

/// Version tag of the shipped pool data files.
pub const POOL_DATA_VERSION: &str = "pool247-v1,pool426-v1";

const POOL247_JSON: &str = include_str!("../data/pool247.json");
const POOL426_JSON: &str = include_str!("../data/pool426.json");

/// A template with exactly one `{}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        Self::with_index(text.into(), 0)
    }

    fn with_index(text: String, index: usize) -> Result<Self> {
        if text.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::InvalidTemplate {
                index,
                template: text,
            });
        }
        Ok(PromptTemplate(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Substitutes `class_name` verbatim for the placeholder.
    pub fn compose(&self, class_name: &str) -> String {
        self.0.replacen(PLACEHOLDER, class_name, 1)
    }
}

/// Composes a raw template string with a class name.
pub fn compose(template: &str, class_name: &str) -> Result<String> {
    if class_name.is_empty() {
        return Err(Error::EmptyClassName(0));
    }
    Ok(PromptTemplate::new(template)?.compose(class_name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolManifest {
    name: String,
    templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassManifest {
    classes: Vec<String>,
}

/// Ordered, duplicate-free list of templates. Position defines the prompt index.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    name: String,
    templates: Vec<PromptTemplate>,
}

impl PromptPool {
    pub fn new(name: impl Into<String>, templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::EmptyPool);
        }
        let mut seen = HashSet::with_capacity(templates.len());
        let mut parsed = Vec::with_capacity(templates.len());
        for (index, text) in templates.into_iter().enumerate() {
            if !seen.insert(text.clone()) {
                return Err(Error::DuplicateTemplate {
                    index,
                    template: text,
                });
            }
            parsed.push(PromptTemplate::with_index(text, index)?);
        }
        Ok(PromptPool {
            name: name.into(),
            templates: parsed,
        })
    }

    pub fn from_json(json: &str, origin: &Path) -> Result<Self> {
        let manifest: PoolManifest =
            serde_json::from_str(json).map_err(|e| Error::parse(origin, e))?;
        Self::new(manifest.name, manifest.templates)
    }

    pub fn to_json(&self) -> String {
        let manifest = PoolManifest {
            name: self.name.clone(),
            templates: self.templates.iter().map(|t| t.0.clone()).collect(),
        };
        serde_json::to_string_pretty(&manifest).expect("pool manifest serializes")
    }

    /// One of the shipped pools: `pool247` or `pool426`.
    pub fn builtin(name: &str) -> Option<Self> {
        let json = match name {
            "pool247" => POOL247_JSON,
            "pool426" => POOL426_JSON,
            _ => return None,
        };
        Some(Self::from_json(json, Path::new(name)).expect("shipped pool data is valid"))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Ordered, non-empty list of class names.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassList {
    names: Vec<String>,
}

impl ClassList {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyClassList);
        }
        if let Some(i) = names.iter().position(String::is_empty) {
            return Err(Error::EmptyClassName(i));
        }
        Ok(ClassList { names })
    }

    pub fn from_json(json: &str, origin: &Path) -> Result<Self> {
        let manifest: ClassManifest =
            serde_json::from_str(json).map_err(|e| Error::parse(origin, e))?;
        Self::new(manifest.classes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ClassManifest {
            classes: self.names.clone(),
        })
        .expect("class manifest serializes")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// The P×C grid of composed strings, prompt-major.
pub fn compose_pool(pool: &PromptPool, classes: &ClassList) -> Vec<Vec<String>> {
    pool.templates()
        .iter()
        .map(|t| classes.names().iter().map(|c| t.compose(c)).collect())
        .collect()
}

pub fn load_pool(path: impl AsRef<Path>) -> Result<PromptPool> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PromptPool::from_json(&json, path)
}

pub fn load_classes(path: impl AsRef<Path>) -> Result<ClassList> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ClassList::from_json(&json, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compose_examples() {
        assert_eq!(
            compose("a photo of a {}.", "dog").unwrap(),
            "a photo of a dog."
        );
        assert_eq!(
            compose("A photo of a {}.", "dog").unwrap(),
            "A photo of a dog."
        );
        assert_eq!(compose("{}", "x").unwrap(), "x");
        assert!(matches!(
            compose("no placeholder here", "x"),
            Err(Error::InvalidTemplate { .. })
        ));
        assert!(matches!(
            compose("{} and {}", "x"),
            Err(Error::InvalidTemplate { .. })
        ));
        assert!(matches!(compose("a {}", ""), Err(Error::EmptyClassName(0))));
    }

    #[test]
    fn class_names_substituted_verbatim() {
        // no case folding, no article fixing, braces in class names untouched
        assert_eq!(compose("a {}.", "Apple").unwrap(), "a Apple.");
        assert_eq!(compose("a {}.", "{}").unwrap(), "a {}.");
    }

    #[test]
    fn grid_is_prompt_major() {
        let pool = PromptPool::new("t", vec!["a {}".into(), "the {}!".into()]).unwrap();
        let classes = ClassList::new(vec!["x".into(), "y".into(), "z".into()]).unwrap();
        let grid = compose_pool(&pool, &classes);
        let flat: Vec<_> = grid.concat();
        assert_eq!(flat, ["a x", "a y", "a z", "the x!", "the y!", "the z!"]);
        assert!(matches!(ClassList::new(vec![]), Err(Error::EmptyClassList)));
    }

    #[test]
    fn manifest_parsing() {
        let p = Path::new("mem");
        let pool = PromptPool::from_json(r#"{"name":"mini","templates":["a photo of a {}."]}"#, p)
            .unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.name(), "mini");

        let dup = PromptPool::from_json(r#"{"name":"d","templates":["a {}","b {}","a {}"]}"#, p);
        assert!(matches!(
            dup,
            Err(Error::DuplicateTemplate { index: 2, .. })
        ));

        let bad = PromptPool::from_json(r#"{"name":"d","templates":["a {}","b"]}"#, p);
        assert!(matches!(bad, Err(Error::InvalidTemplate { index: 1, .. })));

        assert!(matches!(
            PromptPool::from_json("{", p),
            Err(Error::Parse { .. })
        ));

        let classes = ClassList::from_json(r#"{"classes":["cat","dog"]}"#, p).unwrap();
        assert_eq!(classes.names(), ["cat", "dog"]);
    }

    #[test]
    fn builtin_pools() {
        let p247 = PromptPool::builtin("pool247").unwrap();
        assert_eq!(p247.len(), 247);
        let p426 = PromptPool::builtin("pool426").unwrap();
        assert_eq!(p426.len(), 426);
        // the extended pool starts with the base pool in order
        assert_eq!(&p426.templates()[..247], p247.templates());
        assert!(p247
            .templates()
            .iter()
            .any(|t| t.as_str() == "itap of a {}."));
        assert!(p247
            .templates()
            .iter()
            .any(|t| t.as_str() == "there are {} objects in the image."));
        assert!(PromptPool::builtin("pool80").is_none());
    }

    #[test]
    fn pool247_times_thousand_classes() {
        let pool = PromptPool::builtin("pool247").unwrap();
        let classes = ClassList::new((0..1000).map(|i| format!("class{i}")).collect()).unwrap();
        let grid = compose_pool(&pool, &classes);
        assert_eq!(grid.iter().map(Vec::len).sum::<usize>(), 247_000);
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.json");
        let pool = PromptPool::builtin("pool247").unwrap();
        fs::write(&path, pool.to_json()).unwrap();
        assert_eq!(load_pool(&path).unwrap(), pool);
        let cpath = dir.path().join("classes.json");
        let classes = ClassList::new(vec!["a".into()]).unwrap();
        fs::write(&cpath, classes.to_json()).unwrap();
        assert_eq!(load_classes(&cpath).unwrap(), classes);
    }

    proptest! {
        #[test]
        fn composed_length(prefix in "[a-z ]{0,12}", suffix in "[a-z .]{0,12}", class in "[A-Za-z]{1,10}") {
            let text = format!("{prefix}{{}}{suffix}");
            let t = PromptTemplate::new(text.clone()).unwrap();
            let out = t.compose(&class);
            prop_assert_eq!(out.len(), text.len() - 2 + class.len());
            prop_assert_eq!(out, format!("{prefix}{class}{suffix}"));
        }
    }
}
