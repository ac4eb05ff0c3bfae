pub mod ad;
mod binio;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod fusion;
pub mod gradscope;
pub mod lab;
pub mod params;
pub mod probe;
pub mod quantize;
pub mod rng;
pub mod spectral;
pub mod synthav;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/quantizers.md")]
    mod quantizers {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/spectral.md")]
    mod spectral {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
