pub mod denoiser;
pub mod forward;
pub mod guidance;
pub mod io;
pub mod lab;
pub mod linops;
pub mod metrics;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod tensor;
pub mod verify;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/operators.md")]
    mod operators {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    mod guidance {}
    #[doc = include_str!("../../../book/src/samplers.md")]
    mod samplers {}
    #[doc = include_str!("../../../book/src/denoisers.md")]
    mod denoisers {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}
