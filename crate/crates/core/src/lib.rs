pub mod error;
pub mod blockwise;
pub mod eend;
pub mod embedder;
pub mod eval;
pub mod features;
pub mod lab;
pub mod numerics;
pub mod simulate;
pub mod training;
pub use error::{Error, Result};

// The book's code blocks run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/embedders.md")]
    mod embedders {}
    #[doc = include_str!("../../../book/src/eend.md")]
    mod eend {}
    #[doc = include_str!("../../../book/src/blockwise.md")]
    mod blockwise {}
    #[doc = include_str!("../../../book/src/simulate.md")]
    mod simulate {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
