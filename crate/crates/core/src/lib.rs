pub mod coeffs;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod geometry;
pub mod lod;
pub mod persist;
pub mod rboffline;
pub mod rbonline;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/meshes-and-patches.md")]
    struct MeshesAndPatches;
    #[doc = include_str!("../../../book/src/coefficients.md")]
    struct Coefficients;
    #[doc = include_str!("../../../book/src/lod.md")]
    struct Lod;
    #[doc = include_str!("../../../book/src/offline.md")]
    struct Offline;
    #[doc = include_str!("../../../book/src/online.md")]
    struct Online;
    #[doc = include_str!("../../../book/src/richards.md")]
    struct Richards;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
