#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod trainer;

// Compiles and runs the guide's code samples as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/corpus.md")]
    struct Corpus;
    #[doc = include_str!("../../../book/src/encoders.md")]
    struct Encoders;
    #[doc = include_str!("../../../book/src/objectives.md")]
    struct Objectives;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
