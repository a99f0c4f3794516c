use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::GridError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<String>,
}

impl Axis {
    pub fn new(name: impl Into<String>, values: &[&str]) -> Self {
        Self { name: name.into(), values: values.iter().map(|v| v.to_string()).collect() }
    }
}

/// Axes that only combine with settings of one method.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodAxes {
    pub method: String,
    pub axes: Vec<Axis>,
}

/// Hyperparameter grid: shared axes crossed with each method's own axes.
///
/// Text form, one `section.name = v1, v2, ...` per line, `#` comments:
///
/// ```text
/// shared.backbone = Swin-B, EfficientNet-B3
/// shared.lr = 0.01, 0.001
/// arcface.margin = 0.25, 0.5, 0.75
/// arcface.scale = 32, 64, 128
/// triplet.mining = all, semi, hard
/// triplet.margin = 0.1, 0.2, 0.3
/// train.epochs = 100
/// ```
///
/// `shared` axes apply to every method, any other section except `train`
/// names a method, and `train.*` keys hold single fixed values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GridSpec {
    pub shared: Vec<Axis>,
    pub methods: Vec<MethodAxes>,
    pub fixed: BTreeMap<String, String>,
}

/// One point of the grid. `params` follows axis order, shared axes first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Setting {
    pub method: Option<String>,
    pub params: Vec<(String, String)>,
}

impl Setting {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    /// Stable textual key, e.g. `arcface:lr=0.01,margin=0.5,scale=64`.
    pub fn key(&self) -> String {
        let params: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        match &self.method {
            Some(m) => format!("{m}:{}", params.join(",")),
            None => params.join(","),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

fn check_axes<'a>(axes: impl IntoIterator<Item = &'a Axis>) -> Result<(), GridError> {
    for axis in axes {
        if axis.values.is_empty() {
            return Err(GridError::Spec(format!("axis `{}` has no values", axis.name)));
        }
    }
    Ok(())
}

fn product(axes: &[&Axis]) -> usize {
    axes.iter().map(|a| a.values.len()).product()
}

/// Cartesian product with the first axis varying slowest.
fn cartesian(axes: &[&Axis]) -> Vec<Vec<(String, String)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((axis.name.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    out
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.shared.is_empty() && self.methods.is_empty() {
            return Err(GridError::Spec("no axes".into()));
        }
        check_axes(&self.shared)?;
        for m in &self.methods {
            check_axes(&m.axes)?;
        }
        Ok(())
    }

    /// Σ over methods of (shared product × method product), or the shared
    /// product when no method is declared.
    pub fn count(&self) -> usize {
        let shared: Vec<&Axis> = self.shared.iter().collect();
        if self.methods.is_empty() {
            return product(&shared);
        }
        self.methods.iter().map(|m| product(&shared) * product(&m.axes.iter().collect::<Vec<_>>())).sum()
    }

    /// All settings in deterministic order: methods in declaration order,
    /// then lexicographic over axes in declaration order.
    pub fn enumerate(&self) -> Result<Vec<Setting>, GridError> {
        self.validate()?;
        if self.methods.is_empty() {
            let axes: Vec<&Axis> = self.shared.iter().collect();
            return Ok(cartesian(&axes).into_iter().map(|params| Setting { method: None, params }).collect());
        }
        let mut out = Vec::with_capacity(self.count());
        for m in &self.methods {
            let axes: Vec<&Axis> = self.shared.iter().chain(&m.axes).collect();
            out.extend(cartesian(&axes).into_iter().map(|params| Setting { method: Some(m.method.clone()), params }));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self, GridError> {
        let mut spec = GridSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| GridError::Parse { line: line_no, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, values) = line.split_once('=').ok_or_else(|| err("expected `section.name = values`".into()))?;
            let (section, name) =
                key.trim().split_once('.').ok_or_else(|| err(format!("key `{}` lacks a section", key.trim())))?;
            let (section, name) = (section.trim(), name.trim());
            if section.is_empty() || name.is_empty() {
                return Err(err(format!("malformed key `{}`", key.trim())));
            }
            let values: Vec<String> =
                values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(err(format!("axis `{section}.{name}` has no values")));
            }
            match section {
                "train" => {
                    if values.len() != 1 {
                        return Err(err(format!("`train.{name}` takes a single value")));
                    }
                    if spec.fixed.insert(name.to_string(), values[0].clone()).is_some() {
                        return Err(err(format!("duplicate key `train.{name}`")));
                    }
                }
                "shared" => {
                    if spec.shared.iter().any(|a| a.name == name) {
                        return Err(err(format!("duplicate axis `shared.{name}`")));
                    }
                    spec.shared.push(Axis { name: name.to_string(), values });
                }
                method => {
                    let idx = match spec.methods.iter().position(|m| m.method == method) {
                        Some(i) => i,
                        None => {
                            spec.methods.push(MethodAxes { method: method.to_string(), axes: Vec::new() });
                            spec.methods.len() - 1
                        }
                    };
                    let axes = &mut spec.methods[idx].axes;
                    if axes.iter().any(|a| a.name == name) {
                        return Err(err(format!("duplicate axis `{method}.{name}`")));
                    }
                    axes.push(Axis { name: name.to_string(), values });
                }
            }
        }
        for m in &spec.methods {
            if let Some(a) = m.axes.iter().find(|a| spec.shared.iter().any(|s| s.name == a.name)) {
                return Err(GridError::Spec(format!("axis `{}` is both shared and `{}`-specific", a.name, m.method)));
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}
