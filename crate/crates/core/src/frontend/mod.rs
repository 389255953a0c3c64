//! C-subset frontend: parsing, validation, typing helpers, CFG construction.

pub mod ast;
pub mod cfg;
mod lexer;
mod parser;
pub mod pretty;
pub mod typeck;

use thiserror::Error;

pub use ast::*;
pub use cfg::{build_cfg, Cfg, CfgSet, Edge, EdgeLabel, NodeId};
pub use parser::const_eval;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrontendError {
    #[error("parse error at {loc}: {message}")]
    Parse { loc: Loc, message: String },
    #[error("unsupported feature at {loc}: {feature}")]
    Unsupported { feature: String, loc: Loc },
}

impl FrontendError {
    pub(crate) fn parse(loc: Loc, message: impl Into<String>) -> Self {
        FrontendError::Parse {
            loc,
            message: message.into(),
        }
    }

    /// Name of the unsupported feature, if that is what went wrong.
    pub fn unsupported_feature(&self) -> Option<&str> {
        match self {
            FrontendError::Unsupported { feature, .. } => Some(feature),
            FrontendError::Parse { .. } => None,
        }
    }
}

/// Parse a translation unit of the supported subset.
pub fn parse_program(
    source: &str,
    file: &str,
    machine: MachineModel,
) -> Result<Program, FrontendError> {
    parser::parse_program(source, file, machine)
}
