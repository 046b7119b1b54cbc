//! Muon and spectral steepest descent on matrix parameters, with test
//! problems of known smoothness and variance, step-size schedules from the
//! convergence analysis, and a verifier that checks the analysis's per-step
//! inequalities on recorded runs.
//!
//! ```
//! use muonlab::matrix::Matrix;
//! use muonlab::optimizers::{OptimizerConfig, OptimizerState, StepSize, UpdateRule};
//!
//! let cfg = OptimizerConfig::new(UpdateRule::MuonHeavyBall, 0.9, StepSize::Constant(0.1));
//! let mut state = OptimizerState::new(cfg, (2, 2)).unwrap();
//! let x = Matrix::zeros(2, 2);
//! let g = Matrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]).unwrap();
//! let out = state.step(&x, &g).unwrap();
//! assert!((out.new_x.get(0, 0) + 0.1).abs() < 1e-12);
//! ```

pub mod matrix;
pub mod optimizers;
pub mod problems;
pub mod runner;
pub mod schedules;
pub mod verifier;
