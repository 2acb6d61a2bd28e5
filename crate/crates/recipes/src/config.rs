//! YAML config trees, dotted-path overrides and `${key}` interpolation.
//!
//! Loading order is parse, then overrides, then interpolation, so a value
//! set on the command line reaches every place that references it.

use std::fmt;

use indexmap::IndexMap;
use serde_yaml::Value;

use crate::RecipeError;

pub type ConfigMap = IndexMap<String, ConfigNode>;

/// Key naming the registry path of an instantiable map.
pub const COMPONENT_KEY: &str = "_component_";

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigNode {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<ConfigNode>),
    Map(ConfigMap),
}

impl Default for ConfigNode {
    fn default() -> Self {
        ConfigNode::Map(ConfigMap::new())
    }
}

impl ConfigNode {
    /// Node at a dotted path such as `optimizer.lr`.
    pub fn get(&self, path: &str) -> Option<&ConfigNode> {
        path.split('.').try_fold(self, |node, key| node.as_map()?.get(key))
    }

    pub fn as_map(&self) -> Option<&ConfigMap> {
        match self {
            ConfigNode::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_map_mut(&mut self) -> Option<&mut ConfigMap> {
        match self {
            ConfigNode::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            ConfigNode::Bool(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            ConfigNode::Int(i) => Some(i),
            _ => None,
        }
    }

    /// Floats, and integers read as floats.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            ConfigNode::Int(i) => Some(i as f64),
            ConfigNode::Float(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ConfigNode::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, ConfigNode::Null)
    }

    /// The `_component_` path when this is an instantiable map.
    pub fn component(&self) -> Option<&str> {
        self.as_map()?.get(COMPONENT_KEY)?.as_str()
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ConfigNode::Null => "null",
            ConfigNode::Bool(_) => "bool",
            ConfigNode::Int(_) => "int",
            ConfigNode::Float(_) => "float",
            ConfigNode::Str(_) => "string",
            ConfigNode::List(_) => "list",
            ConfigNode::Map(_) => "map",
        }
    }

    pub fn to_yaml_value(&self) -> Value {
        match self {
            ConfigNode::Null => Value::Null,
            ConfigNode::Bool(b) => Value::Bool(*b),
            ConfigNode::Int(i) => Value::Number((*i).into()),
            ConfigNode::Float(f) => Value::Number((*f).into()),
            ConfigNode::Str(s) => Value::String(s.clone()),
            ConfigNode::List(items) => Value::Sequence(items.iter().map(ConfigNode::to_yaml_value).collect()),
            ConfigNode::Map(m) => {
                Value::Mapping(m.iter().map(|(k, v)| (Value::String(k.clone()), v.to_yaml_value())).collect())
            }
        }
    }

    pub fn to_yaml(&self) -> String {
        match self {
            ConfigNode::Map(m) if m.is_empty() => String::new(),
            other => serde_yaml::to_string(&other.to_yaml_value()).expect("config values always serialize"),
        }
    }

    /// Deserializes this subtree into a typed struct.
    pub fn deserialize<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T, RecipeError> {
        serde_yaml::from_value(self.to_yaml_value()).map_err(|e| RecipeError::config(key, e.to_string()))
    }

    fn from_yaml(value: Value, at: &str) -> Result<ConfigNode, RecipeError> {
        let unsupported = |what: &str| RecipeError::Parse { line: 0, column: 0, message: format!("{at}: {what}") };
        Ok(match value {
            Value::Null => ConfigNode::Null,
            Value::Bool(b) => ConfigNode::Bool(b),
            Value::Number(n) => match n.as_i64() {
                Some(i) => ConfigNode::Int(i),
                None if n.is_u64() => return Err(unsupported("integer does not fit in 64 signed bits")),
                None => ConfigNode::Float(n.as_f64().expect("non-integer numbers are floats")),
            },
            Value::String(s) => ConfigNode::Str(s),
            Value::Sequence(items) => ConfigNode::List(
                items
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| ConfigNode::from_yaml(v, &format!("{at}[{i}]")))
                    .collect::<Result<_, _>>()?,
            ),
            Value::Mapping(m) => {
                let mut out = ConfigMap::with_capacity(m.len());
                for (k, v) in m {
                    let key = match k {
                        Value::String(s) => s,
                        Value::Bool(b) => b.to_string(),
                        Value::Number(n) => n.to_string(),
                        other => return Err(unsupported(&format!("map key {other:?} is not a scalar"))),
                    };
                    let child = if at.is_empty() { key.clone() } else { format!("{at}.{key}") };
                    let node = ConfigNode::from_yaml(v, &child)?;
                    if out.insert(key.clone(), node).is_some() {
                        return Err(unsupported(&format!("duplicate key {key:?}")));
                    }
                }
                ConfigNode::Map(out)
            }
            Value::Tagged(t) => return Err(unsupported(&format!("YAML tag {} is not supported", t.tag))),
        })
    }
}

impl fmt::Display for ConfigNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigNode::Null => f.write_str("null"),
            ConfigNode::Bool(b) => write!(f, "{b}"),
            ConfigNode::Int(i) => write!(f, "{i}"),
            ConfigNode::Float(x) => write!(f, "{x:?}"),
            ConfigNode::Str(s) => f.write_str(s),
            other => f.write_str(other.to_yaml().trim_end()),
        }
    }
}

fn yaml_error(e: serde_yaml::Error) -> RecipeError {
    let (line, column) = e.location().map_or((0, 0), |l| (l.line(), l.column()));
    let message = e.to_string();
    // serde_yaml appends the location to some messages; it is reported separately
    let message = match message.find(" at line ") {
        Some(i) => message[..i].to_string(),
        None => message,
    };
    RecipeError::Parse { line, column, message }
}

/// Parses without resolving interpolations. The root must be a map; an empty
/// document is an empty map.
pub fn parse_raw(text: &str) -> Result<ConfigNode, RecipeError> {
    let value: Value = serde_yaml::from_str(text).map_err(yaml_error)?;
    match ConfigNode::from_yaml(value, "")? {
        ConfigNode::Null => Ok(ConfigNode::default()),
        node @ ConfigNode::Map(_) => Ok(node),
        other => Err(RecipeError::Parse {
            line: 1,
            column: 1,
            message: format!("top level must be a map, got a {}", other.type_name()),
        }),
    }
}

/// Parses and resolves interpolations.
pub fn parse_config(text: &str) -> Result<ConfigNode, RecipeError> {
    resolve(&parse_raw(text)?)
}

/// Parse, apply overrides, then resolve.
pub fn load_config(text: &str, overrides: &[impl AsRef<str>]) -> Result<ConfigNode, RecipeError> {
    let tree = apply_overrides(parse_raw(text)?, overrides)?;
    resolve(&tree)
}

/// Applies `dotted.path=value` overrides in order; later ones win. Values
/// are parsed as YAML, so `True` is a bool and `1e-4` a float. Missing maps
/// along the path are created.
pub fn apply_overrides(mut tree: ConfigNode, overrides: &[impl AsRef<str>]) -> Result<ConfigNode, RecipeError> {
    for text in overrides {
        let text = text.as_ref();
        let err = |message: String| RecipeError::Override { text: text.to_string(), message };
        let (path, raw) = text.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(err(format!("empty segment in path {path:?}")));
        }
        let value: Value =
            serde_yaml::from_str(raw).map_err(|e| err(format!("value does not parse: {}", yaml_error(e))))?;
        let value = ConfigNode::from_yaml(value, path).map_err(|e| err(e.to_string()))?;

        let (last, parents) = keys.split_last().expect("split yields at least one segment");
        let mut node = &mut tree;
        for (depth, key) in parents.iter().enumerate() {
            let kind = node.type_name();
            let Some(map) = node.as_map_mut() else {
                return Err(err(format!("{} is a {kind}, not a map", keys[..depth].join("."))));
            };
            node = map.entry(key.to_string()).or_insert_with(ConfigNode::default);
        }
        let here = keys[..keys.len() - 1].join(".");
        match node {
            ConfigNode::Map(map) => {
                map.insert(last.to_string(), value);
            }
            other => return Err(err(format!("{here} is a {}, not a map", other.type_name()))),
        }
    }
    Ok(tree)
}

/// Replaces every `${path}` with the referenced node. A string that is a
/// single reference takes the referenced value with its type; references
/// embedded in longer strings are spliced in as text and must be scalars.
pub fn resolve(root: &ConfigNode) -> Result<ConfigNode, RecipeError> {
    let mut stack = Vec::new();
    resolve_node(root, root, "", &mut stack)
}

fn resolve_node(
    root: &ConfigNode,
    node: &ConfigNode,
    at: &str,
    stack: &mut Vec<String>,
) -> Result<ConfigNode, RecipeError> {
    let child = |k: &str| if at.is_empty() { k.to_string() } else { format!("{at}.{k}") };
    match node {
        ConfigNode::Str(s) => resolve_str(root, s, at, stack),
        ConfigNode::List(items) => items
            .iter()
            .enumerate()
            .map(|(i, v)| resolve_node(root, v, &format!("{at}[{i}]"), stack))
            .collect::<Result<_, _>>()
            .map(ConfigNode::List),
        ConfigNode::Map(m) => m
            .iter()
            .map(|(k, v)| Ok((k.clone(), resolve_node(root, v, &child(k), stack)?)))
            .collect::<Result<_, _>>()
            .map(ConfigNode::Map),
        scalar => Ok(scalar.clone()),
    }
}

enum Piece<'a> {
    Text(&'a str),
    Ref(&'a str),
}

fn split_refs<'a>(s: &'a str, at: &str) -> Result<Vec<Piece<'a>>, RecipeError> {
    let mut pieces = Vec::new();
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        if start > 0 {
            pieces.push(Piece::Text(&rest[..start]));
        }
        let body = &rest[start + 2..];
        let end = body.find('}').ok_or_else(|| RecipeError::Interpolation {
            at: at.to_string(),
            message: format!("unterminated ${{ in {s:?}"),
        })?;
        let key = body[..end].trim();
        if key.is_empty() {
            return Err(RecipeError::Interpolation { at: at.to_string(), message: "empty ${} reference".into() });
        }
        pieces.push(Piece::Ref(key));
        rest = &body[end + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

fn lookup(root: &ConfigNode, key: &str, at: &str, stack: &mut Vec<String>) -> Result<ConfigNode, RecipeError> {
    if let Some(i) = stack.iter().position(|k| k == key) {
        let mut chain = stack[i..].to_vec();
        chain.push(key.to_string());
        return Err(RecipeError::Cycle(chain.join(" -> ")));
    }
    let target =
        root.get(key).ok_or_else(|| RecipeError::Unresolved { reference: key.to_string(), at: at.to_string() })?;
    stack.push(key.to_string());
    let resolved = resolve_node(root, target, key, stack);
    stack.pop();
    resolved
}

fn resolve_str(root: &ConfigNode, s: &str, at: &str, stack: &mut Vec<String>) -> Result<ConfigNode, RecipeError> {
    let pieces = split_refs(s, at)?;
    if let [Piece::Ref(key)] = pieces.as_slice() {
        return lookup(root, key, at, stack);
    }
    let mut out = String::with_capacity(s.len());
    for piece in pieces {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Ref(key) => match lookup(root, key, at, stack)? {
                v @ (ConfigNode::Bool(_) | ConfigNode::Int(_) | ConfigNode::Float(_) | ConfigNode::Str(_)) => {
                    out.push_str(&v.to_string())
                }
                other => {
                    return Err(RecipeError::Interpolation {
                        at: at.to_string(),
                        message: format!("${{{key}}} is a {} and cannot be embedded in text", other.type_name()),
                    })
                }
            },
        }
    }
    Ok(ConfigNode::Str(out))
}
