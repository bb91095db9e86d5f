//! Lifted pCTL model checking for relational MDPs.

pub mod checker;
pub mod engine;
pub mod model;
pub mod oracle;
pub mod pctl;
pub mod syntax;
pub mod term;
