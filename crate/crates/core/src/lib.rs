//! Markov-modulated infinite-server queues.
//!
//! Jobs arrive at rate `λ_{J(t)}` and are served in parallel, where `J` is an
//! irreducible background chain. Under the scaling `λ → Nλ`, `Q → N^α Q`
//! this crate provides:
//!
//! * [`markov`]: stationary, fundamental and deviation matrices of the chain.
//! * [`limits`]: fluid limits and CLT variances in closed form.
//! * [`moments`]: exact finite-`N` means and variances.
//! * [`sim`]: event-driven and conditional-Poisson samplers.
//! * [`experiments`]: statistical checks and CSV/JSON reports.
//! * [`config`] and [`cli`]: scenario files and the `modinf` subcommands.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod limits;
pub mod markov;
pub mod moments;
pub mod quadrature;
pub mod sim;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/background-chain.md")]
    pub mod background_chain {}
    #[doc = include_str!("../../../book/src/scaling.md")]
    pub mod scaling {}
    #[doc = include_str!("../../../book/src/fluctuations.md")]
    pub mod fluctuations {}
    #[doc = include_str!("../../../book/src/cross-time.md")]
    pub mod cross_time {}
    #[doc = include_str!("../../../book/src/exact-moments.md")]
    pub mod exact_moments {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub mod simulation {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
}
