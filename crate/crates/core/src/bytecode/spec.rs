use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

/// Node id reserved for the snapshot marker in serialized programs.
pub const SNAPSHOT_NODE: u16 = u16::MAX;

/// Format spec for the multi-connection network interface: a node that opens
/// a connection and a node that sends one packet over a borrowed connection.
pub const NET_SPEC: &str = "\
# multi-connection network emulation
data d_bytes
handle e_con
node con_open produces e_con
node pkt borrows e_con data d_bytes
";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate name `{name}`")]
    Duplicate { line: usize, name: String },
    #[error("line {line}: undeclared kind `{name}`")]
    UnknownKind { line: usize, name: String },
    #[error("spec declares no nodes")]
    NoNodes,
    #[error("too many nodes")]
    TooManyNodes,
    #[error("spec has no {0} node")]
    MissingRole(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HandleKind(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataKind(pub u16);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeType {
    pub name: String,
    pub borrows: Vec<HandleKind>,
    pub produces: Option<HandleKind>,
    pub data: Option<DataKind>,
}

impl NodeType {
    /// Carries a payload and produces no handle, so it can be duplicated,
    /// dropped or reordered without invalidating references.
    pub fn is_packet_like(&self) -> bool {
        self.data.is_some() && self.produces.is_none()
    }
}

/// Declared data kinds, handle kinds and node types.
///
/// Text format, one declaration per line, `#` starts a comment:
///
/// ```text
/// data d_bytes
/// handle e_con
/// node con_open produces e_con
/// node pkt borrows e_con data d_bytes
/// ```
///
/// A node may borrow any number of handles (comma separated), produce at
/// most one handle and carry at most one data field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatSpec {
    data_kinds: Vec<String>,
    handle_kinds: Vec<String>,
    nodes: Vec<NodeType>,
}

/// Which nodes the guest treats as connection-open and packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetBinding {
    pub connect: u16,
    pub packet: u16,
}

impl FormatSpec {
    pub fn parse(text: &str) -> Result<FormatSpec, SpecError> {
        let mut spec = FormatSpec {
            data_kinds: Vec::new(),
            handle_kinds: Vec::new(),
            nodes: Vec::new(),
        };
        let mut names = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut words = content.split_whitespace();
            let keyword = words.next().unwrap();
            let name = words.next().ok_or_else(|| SpecError::Syntax {
                line,
                msg: format!("`{keyword}` needs a name"),
            })?;
            if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(SpecError::Syntax {
                    line,
                    msg: format!("bad name `{name}`"),
                });
            }
            if !names.insert(name.to_string()) {
                return Err(SpecError::Duplicate {
                    line,
                    name: name.to_string(),
                });
            }
            match keyword {
                "data" | "handle" => {
                    if let Some(extra) = words.next() {
                        return Err(SpecError::Syntax {
                            line,
                            msg: format!("unexpected `{extra}`"),
                        });
                    }
                    if keyword == "data" {
                        spec.data_kinds.push(name.to_string());
                    } else {
                        spec.handle_kinds.push(name.to_string());
                    }
                }
                "node" => {
                    let node = spec.parse_node(line, name, words)?;
                    spec.nodes.push(node);
                }
                other => {
                    return Err(SpecError::Syntax {
                        line,
                        msg: format!("unknown declaration `{other}`"),
                    })
                }
            }
        }
        if spec.nodes.is_empty() {
            return Err(SpecError::NoNodes);
        }
        if spec.nodes.len() >= SNAPSHOT_NODE as usize {
            return Err(SpecError::TooManyNodes);
        }
        Ok(spec)
    }

    fn parse_node<'a>(
        &self,
        line: usize,
        name: &str,
        mut words: impl Iterator<Item = &'a str>,
    ) -> Result<NodeType, SpecError> {
        let mut node = NodeType {
            name: name.to_string(),
            borrows: Vec::new(),
            produces: None,
            data: None,
        };
        let syntax = |msg: String| SpecError::Syntax { line, msg };
        while let Some(clause) = words.next() {
            let arg = words
                .next()
                .ok_or_else(|| syntax(format!("`{clause}` needs an argument")))?;
            match clause {
                "borrows" => {
                    for k in arg.split(',').filter(|k| !k.is_empty()) {
                        node.borrows.push(self.handle_kind(line, k)?);
                    }
                }
                "produces" if node.produces.is_none() => {
                    node.produces = Some(self.handle_kind(line, arg)?);
                }
                "data" if node.data.is_none() => {
                    let id = self
                        .data_kinds
                        .iter()
                        .position(|d| d == arg)
                        .ok_or_else(|| SpecError::UnknownKind {
                            line,
                            name: arg.to_string(),
                        })?;
                    node.data = Some(DataKind(id as u16));
                }
                "produces" | "data" => return Err(syntax(format!("repeated `{clause}`"))),
                other => return Err(syntax(format!("unknown clause `{other}`"))),
            }
        }
        Ok(node)
    }

    fn handle_kind(&self, line: usize, name: &str) -> Result<HandleKind, SpecError> {
        self.handle_kinds
            .iter()
            .position(|k| k == name)
            .map(|i| HandleKind(i as u16))
            .ok_or_else(|| SpecError::UnknownKind {
                line,
                name: name.to_string(),
            })
    }

    pub fn nodes(&self) -> &[NodeType] {
        &self.nodes
    }

    pub fn node(&self, id: u16) -> Option<&NodeType> {
        self.nodes.get(id as usize)
    }

    pub fn node_id(&self, name: &str) -> Option<u16> {
        self.nodes.iter().position(|n| n.name == name).map(|i| i as u16)
    }

    pub fn handle_kind_name(&self, k: HandleKind) -> &str {
        &self.handle_kinds[k.0 as usize]
    }

    pub fn data_kind_name(&self, k: DataKind) -> &str {
        &self.data_kinds[k.0 as usize]
    }

    /// Finds the connection-open node (borrows nothing, produces a handle)
    /// and the packet node (borrows exactly that handle kind, carries data).
    pub fn net_binding(&self) -> Result<NetBinding, SpecError> {
        let (connect, kind) = self
            .nodes
            .iter()
            .enumerate()
            .find_map(|(i, n)| match (n.borrows.is_empty(), n.produces) {
                (true, Some(k)) => Some((i as u16, k)),
                _ => None,
            })
            .ok_or(SpecError::MissingRole("connection-open"))?;
        let packet = self
            .nodes
            .iter()
            .position(|n| n.is_packet_like() && n.borrows == [kind])
            .ok_or(SpecError::MissingRole("packet"))? as u16;
        Ok(NetBinding { connect, packet })
    }
}

impl Default for FormatSpec {
    fn default() -> Self {
        FormatSpec::parse(NET_SPEC).expect("built-in spec parses")
    }
}

impl fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.data_kinds {
            writeln!(f, "data {d}")?;
        }
        for h in &self.handle_kinds {
            writeln!(f, "handle {h}")?;
        }
        for n in &self.nodes {
            write!(f, "node {}", n.name)?;
            if !n.borrows.is_empty() {
                let names: Vec<_> = n.borrows.iter().map(|&k| self.handle_kind_name(k)).collect();
                write!(f, " borrows {}", names.join(","))?;
            }
            if let Some(k) = n.produces {
                write!(f, " produces {}", self.handle_kind_name(k))?;
            }
            if let Some(d) = n.data {
                write!(f, " data {}", self.data_kind_name(d))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
