//! Format specs, the flat bytecode program format, a builder for seeds, and
//! the mutation engine.

mod builder;
mod mutate;
mod program;
mod spec;

pub use builder::{BuildError, GraphBuilder, Token};
pub use mutate::{havoc, Corpus, MutationKind, Mutator, MAX_PAYLOAD};
pub use program::{Op, Program, ProgramError, Violation, MAGIC};
pub use spec::{DataKind, FormatSpec, HandleKind, NetBinding, NodeType, SpecError, NET_SPEC, SNAPSHOT_NODE};
