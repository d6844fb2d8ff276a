pub mod autograd;
pub mod gradcheck;
pub mod nn;
pub mod data;
pub mod segmentation;
pub mod optim;
pub mod text;
pub mod denoiser;
pub mod diffusion;
pub mod training;
pub mod evaluation;
pub mod pipeline;
