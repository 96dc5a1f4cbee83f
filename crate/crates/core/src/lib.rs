pub mod bounds;
pub mod control;
pub mod dualopt;
pub mod error;
pub mod freqgrid;
pub mod linalg;
pub mod pipeline;
pub mod quadrature;
pub mod reduction;
mod serde_matrix;
pub mod spectra;
pub mod synthesis;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/channels.md")]
    mod channels {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/control.md")]
    mod control {}
    #[doc = include_str!("../../../book/src/reduction.md")]
    mod reduction {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
