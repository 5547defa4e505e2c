//! Simulation and exact-computation toolkit for Bienaymé–Galton–Watson trees
//! in varying and random environment.
//!
//! * [`env`]: offspring laws, generating functions, environments.
//! * [`tree`]: samplers for generation sizes, plane trees, forests and Geiger trees.
//! * [`explore`]: depth-first encodings (Łukasiewicz path, height process) and
//!   the diagnostics built on them.
//! * [`analysis`]: exact survival probabilities, variance formulas and
//!   environment condition checks.
//! * [`stats`]: Monte Carlo experiments and goodness-of-fit utilities.

pub mod analysis;
pub mod env;
pub mod explore;
pub mod rng;
pub mod stats;
pub mod tree;

pub use env::{EnvError, EnvSpec, EnvStream, OffspringDist};
pub use explore::ExplorationPath;
pub use tree::{Forest, GeigerTree, PlaneTree};
