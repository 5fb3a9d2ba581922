#![doc = include_str!("../../../book/src/introduction.md")]

pub mod context;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fovcut;
pub mod jsonl;
pub mod net;
pub mod rng;
pub mod synth;
pub mod tract;
pub mod trk;

pub use error::{Error, Result};
pub use tract::{CutStatus, Point, Streamline, Tractogram};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/streamlines.md")]
    mod streamlines {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cutting.md")]
    mod cutting {}
    #[doc = include_str!("../../../book/src/context.md")]
    mod context {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
