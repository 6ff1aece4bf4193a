//! Free-direction mutual distillation between two graph neural networks.
//!
//! Two networks train side by side on one graph. For every training node a
//! small policy network decides which of the two teaches the other, and a
//! second policy decides whether the teacher's local neighborhood structure
//! is also transferred. Both policies learn by REINFORCE from the change in
//! the networks' losses.
//!
//! ```no_run
//! use freekd::{generate_sbm, train, SbmParams, TrainConfig};
//!
//! let graph = generate_sbm(&SbmParams::default()).unwrap();
//! let outcome = train(&graph, &TrainConfig::default()).unwrap();
//! println!("{:.3} {:.3}", outcome.metrics.test_f1_phi, outcome.metrics.test_f1_psi);
//! ```

pub mod agent;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod distill;
pub mod graph;
pub mod models;
pub mod optim;
pub mod runs;
pub mod tensor;
pub mod trainer;

pub use agent::{compute_reward, policy_act, policy_update, PolicyNet};
pub use autodiff::{Tape, TensorError, Var};
pub use config::{TrainConfig, Variant};
pub use graph::{generate_sbm, load_dataset, save_dataset, Graph, SbmParams};
pub use models::{Arch, GnnModel, GraphOps};
pub use tensor::{CsrMatrix, Tensor};
pub use trainer::{evaluate_micro_f1, noise_probe, train, TrainOutcome};
