pub mod backbone;
pub mod diffusion;
pub mod embedders;
pub mod eval;
pub mod error;
pub mod global_conditioning;
pub mod local_fuser;
pub mod rng;
pub mod nn;
pub mod tensor;
pub mod toy_world;
pub mod trainer;
pub mod triplets;
