//! Multi-agent EV charging coordination on radial distribution feeders under
//! voltage and driver-satisfaction constraints.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod encoder;
pub mod env;
pub mod fleet;
pub mod grid;
pub mod learner;
mod plot;
pub mod signals;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/feeder.md")]
    mod feeder {}
    #[doc = include_str!("../../../book/src/chargers.md")]
    mod chargers {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/environment.md")]
    mod environment {}
    #[doc = include_str!("../../../book/src/encoding.md")]
    mod encoding {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
