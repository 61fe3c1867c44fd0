use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use super::program::{Op, Program, Violation};
use super::spec::{FormatSpec, HandleKind};

static NEXT_BUILDER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{node}` takes {expected} handles, got {got}")]
    ArgCount { node: String, expected: usize, got: usize },
    #[error("argument {index} of `{node}` has the wrong handle kind")]
    KindMismatch { node: String, index: usize },
    #[error("token belongs to a different builder")]
    ForeignToken,
    #[error("node `{0}` has no data field")]
    UnexpectedPayload(String),
    #[error("nothing to build")]
    Empty,
    #[error("built program is invalid: {0:?}")]
    Invalid(Vec<Violation>),
}

/// Handle returned by a builder call. Remembers which call produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Token {
    builder: u64,
    slot: u32,
    kind: HandleKind,
}

impl Token {
    pub fn slot(&self) -> u32 {
        self.slot
    }
}

/// Logs node calls and serializes them into a flat program.
///
/// ```
/// use snapnet::bytecode::{FormatSpec, GraphBuilder};
/// let spec = FormatSpec::default();
/// let mut b = GraphBuilder::new(&spec);
/// let con = b.call("con_open", &[], b"").unwrap().unwrap();
/// b.call("pkt", &[con], b"GET /").unwrap();
/// assert_eq!(b.build().unwrap().ops.len(), 2);
/// ```
#[derive(Debug)]
pub struct GraphBuilder<'s> {
    spec: &'s FormatSpec,
    id: u64,
    ops: Vec<Op>,
}

impl<'s> GraphBuilder<'s> {
    pub fn new(spec: &'s FormatSpec) -> Self {
        Self {
            spec,
            id: NEXT_BUILDER.fetch_add(1, Ordering::Relaxed),
            ops: Vec::new(),
        }
    }

    pub fn call(&mut self, node: &str, args: &[Token], payload: &[u8]) -> Result<Option<Token>, BuildError> {
        let id = self
            .spec
            .node_id(node)
            .ok_or_else(|| BuildError::UnknownNode(node.to_string()))?;
        let ty = self.spec.node(id).unwrap();
        if ty.borrows.len() != args.len() {
            return Err(BuildError::ArgCount {
                node: node.to_string(),
                expected: ty.borrows.len(),
                got: args.len(),
            });
        }
        for (index, (tok, &want)) in args.iter().zip(&ty.borrows).enumerate() {
            if tok.builder != self.id {
                return Err(BuildError::ForeignToken);
            }
            if tok.kind != want {
                return Err(BuildError::KindMismatch {
                    node: node.to_string(),
                    index,
                });
            }
        }
        if ty.data.is_none() && !payload.is_empty() {
            return Err(BuildError::UnexpectedPayload(node.to_string()));
        }
        let slot = self.ops.len() as u32;
        self.ops.push(Op {
            node: id,
            args: args.iter().map(|t| t.slot).collect(),
            payload: payload.to_vec(),
        });
        Ok(ty.produces.map(|kind| Token {
            builder: self.id,
            slot,
            kind,
        }))
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn build(&self) -> Result<Program, BuildError> {
        if self.ops.is_empty() {
            return Err(BuildError::Empty);
        }
        let p = Program::new(self.ops.clone());
        p.validate(self.spec).map_err(BuildError::Invalid)?;
        Ok(p)
    }
}
