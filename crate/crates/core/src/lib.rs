//! Numerical toolkit for latent-space disentanglement.
//!
//! * [`latent`]: latent batches, seeded sampling, batch statistics.
//! * [`decorr`]: decorrelation regularizer and its analytic gradient.
//! * [`direction`]: closed-form semantic directions, manipulation, EMA tracking.
//! * [`jacobian`]: stacked per-target regression.
//! * [`localized`]: sparse, near-orthogonal factorization of a Jacobian.
//! * [`cluster`]: Ward agglomeration over absolute-cosine dissimilarity.
//! * [`oracle`]: planted linear world used to verify all of the above.
//! * [`pipeline`]: config-driven end-to-end runs and parameter sweeps.

pub mod cluster;
pub mod decorr;
pub mod direction;
pub mod error;
pub mod io;
pub mod jacobian;
mod linalg;
pub mod latent;
pub mod localized;
pub mod oracle;
pub mod pipeline;

pub use error::{Error, Result};
pub use latent::{LatentBatch, RngSeed};
