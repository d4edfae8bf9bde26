//! The guide in `book/`, compiled so that its snippets run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/scenes.md")]
pub mod scenes {}
#[doc = include_str!("../../../book/src/dynamics.md")]
pub mod dynamics {}
#[doc = include_str!("../../../book/src/contacts.md")]
pub mod contacts {}
#[doc = include_str!("../../../book/src/gradients.md")]
pub mod gradients {}
#[doc = include_str!("../../../book/src/bounce.md")]
pub mod bounce {}
#[doc = include_str!("../../../book/src/optimization.md")]
pub mod optimization {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
