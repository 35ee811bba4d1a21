//! Robust model predictive control via sequential convex restriction.
//!
//! The crate turns a nonlinear discrete-time system with ellipsoidal
//! disturbances and convex obstacles into a sequence of convex QCQPs whose
//! solutions certify, through a Brouwer fixed-point argument, that every
//! disturbance realization keeps the state trajectory inside a tube that
//! avoids all obstacles.
//!
//! Module map:
//! - [`model`] — systems in nonlinear feedback form `f(x,u) = M ψ(Cx, u)`,
//!   residuals and their Jacobians, the bundled ground-vehicle benchmark.
//! - [`envelope`] — convex/concave quadratic estimator pairs for residual
//!   components and the vertex-enumeration bound constraints.
//! - [`trajectory`] — stacked-trajectory algebra: rollouts, the fixed-point
//!   operator, block sensitivities, and the tube face maps.
//! - [`restriction`] — assembly of the convex restriction: self-mapping tube
//!   rows, obstacle half-space rows, disturbance support terms, and the
//!   worst-case cost epigraph.
//! - [`conic`] — a solver-agnostic convex QCQP intermediate representation
//!   plus the backend adapter (Clarabel) and independent feasibility
//!   re-checking.
//! - [`scr`] — the sequential convex restriction loop, margin certification,
//!   the receding-horizon driver, and Monte-Carlo verification.
//! - [`scenario`] / [`emit`] — scenario files, result emission, and the
//!   benchmark harness behind the CLI.

pub mod conic;
pub mod emit;
pub mod envelope;
pub mod model;
pub mod restriction;
pub mod scenario;
pub mod scr;
pub mod trajectory;

pub use conic::{canonicalize, solve, ClarabelBackend, ConicBackend, ConicProgram, SolveOutcome, SolveStatus, SolverTolerances};
pub use envelope::{bilinear_envelope, cos_envelope, sin_envelope, QuadraticEnvelope};
pub use model::{ground_vehicle_model, FeedbackModel, NominalPoint};
pub use restriction::{ConstraintCensus, ObstacleSet, RestrictionProgram, SafetyRestriction, Tube, UncertaintyModel};
pub use scenario::Scenario;
pub use scr::{monte_carlo_verify, scr_solve, CertifiedSolution, RobustProblem, ScrOptions};
