//! Reference models with exact inference: PPCA, a two-component mixture
//! with Beta-distributed weight, and an identity-decoder mixture VAE.

pub mod gmm;
pub mod gmvae;
pub mod ppca;
pub mod quadrature;

pub use gmm::{posterior_grid, run_scenario, GmmModel, GmmReport, GmmScenario};
pub use gmvae::{summarize, ClusterPosteriorSummary, GmvaeOracle};
pub use ppca::{
    collapsed_loading, gaussian_kl_to_standard, likelihood_flatness, ppca_as_model, ppca_encoder, ppca_log_marginal,
    ppca_noise_sweep, ppca_posterior, sweep_loading, GaussianPosterior, PpcaModel, SweepRow, SWEEP_ROW_NORM,
};
pub use quadrature::{composite_gauss_legendre, gauss_legendre, gauss_legendre_on};
