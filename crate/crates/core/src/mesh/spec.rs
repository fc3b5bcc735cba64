use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::LogicalMesh;
use crate::error::{Error, Result};

/// Per tensor axis, the mesh axes it is split over. An empty list means the
/// tensor axis is replicated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PartitionSpec(Vec<Vec<String>>);

impl PartitionSpec {
    pub fn new(axes: Vec<Vec<String>>) -> Self {
        PartitionSpec(axes)
    }

    pub fn replicated(rank: usize) -> Self {
        PartitionSpec(vec![Vec::new(); rank])
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn axes(&self) -> &[Vec<String>] {
        &self.0
    }

    pub fn axis(&self, i: usize) -> &[String] {
        &self.0[i]
    }

    pub(crate) fn axes_mut(&mut self) -> &mut Vec<Vec<String>> {
        &mut self.0
    }

    pub fn is_replicated(&self) -> bool {
        self.0.iter().all(|a| a.is_empty())
    }

    /// All mesh axes used anywhere in the spec.
    pub fn mesh_axes(&self) -> impl Iterator<Item = &String> {
        self.0.iter().flatten()
    }

    /// Number of shards the tensor is split into.
    pub fn shard_count(&self, mesh: &LogicalMesh) -> u64 {
        self.0.iter().map(|a| mesh.factor(a)).product()
    }

    pub fn validate(&self, mesh: &LogicalMesh) -> Result<()> {
        let mut seen = BTreeSet::new();
        for name in self.mesh_axes() {
            if mesh.axis_size(name).is_none() {
                return Err(Error::validation("partition spec", format!("{self}: no mesh axis `{name}`")));
            }
            if !seen.insert(name) {
                return Err(Error::validation("partition spec", format!("{self}: mesh axis `{name}` used twice")));
            }
        }
        Ok(())
    }

    /// Drop mesh axes of size 1; they do not split anything.
    pub fn normalized(&self, mesh: &LogicalMesh) -> PartitionSpec {
        PartitionSpec(
            self.0
                .iter()
                .map(|a| a.iter().filter(|n| mesh.axis_size(n).is_none_or(|s| s > 1)).cloned().collect())
                .collect(),
        )
    }
}

impl fmt::Display for PartitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("P(")?;
        for (i, axes) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "axis{i}=")?;
            if axes.is_empty() {
                f.write_str("~")?;
            } else {
                f.write_str(&axes.join("+"))?;
            }
        }
        f.write_str(")")
    }
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::SpecParse { pos: self.pos, reason: reason.into() }
    }

    fn skip_ws(&mut self) {
        while self.s[self.pos..].starts_with([' ', '\t']) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, token: &str) -> Result<()> {
        self.skip_ws();
        if self.s[self.pos..].starts_with(token) {
            self.pos += token.len();
            Ok(())
        } else {
            Err(self.err(format!("expected `{token}`")))
        }
    }

    fn peek(&mut self, token: &str) -> bool {
        self.skip_ws();
        self.s[self.pos..].starts_with(token)
    }

    fn ident(&mut self) -> Result<&str> {
        self.skip_ws();
        let start = self.pos;
        let len =
            self.s[start..].find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(self.s.len() - start);
        if len == 0 {
            return Err(self.err("expected a mesh axis name"));
        }
        self.pos += len;
        Ok(&self.s[start..start + len])
    }
}

impl FromStr for PartitionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cur = Cursor { s, pos: 0 };
        cur.eat("P(")?;
        let mut axes = Vec::new();
        if !cur.peek(")") {
            loop {
                let label = format!("axis{}", axes.len());
                cur.eat(&label)?;
                cur.eat("=")?;
                let mut names = Vec::new();
                if cur.peek("~") {
                    cur.eat("~")?;
                } else {
                    names.push(cur.ident()?.to_string());
                    while cur.peek("+") {
                        cur.eat("+")?;
                        names.push(cur.ident()?.to_string());
                    }
                }
                axes.push(names);
                if cur.peek(",") {
                    cur.eat(",")?;
                } else {
                    break;
                }
            }
        }
        cur.eat(")")?;
        cur.skip_ws();
        if cur.pos != s.len() {
            return Err(cur.err("trailing input"));
        }
        Ok(PartitionSpec(axes))
    }
}

impl Serialize for PartitionSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PartitionSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
