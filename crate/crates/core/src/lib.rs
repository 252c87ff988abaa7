pub mod autodiff;
pub mod community;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod store;
pub mod superfeatures;

pub use error::{Error, Result};

/// The guide's chapters, so their code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/type-m-models.md")]
    mod type_m_models {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/superfeatures.md")]
    mod superfeatures {}
    #[doc = include_str!("../../../book/src/chimeric.md")]
    mod chimeric {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
