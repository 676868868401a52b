//! Toolkit for measured BRDFs: reconstruction of full reflectance fields from
//! sparse directional samples with a set-encoder + hypernetwork + neural-field
//! model, compression of dense BRDFs into compact latent embeddings, IPCA and
//! NBRDF baselines, a direct-lighting sphere renderer and image quality
//! metrics for evaluation.

pub mod baselines;
pub mod hypernet;
pub mod merl;
pub mod nn;
pub mod param;
pub mod preproc;
pub mod render;
pub mod synth;
pub mod threading;
