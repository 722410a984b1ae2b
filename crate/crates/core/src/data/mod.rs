pub mod batch;
pub mod manifest;
pub mod mmf;
pub mod npy;
pub mod record;
pub mod split;
pub mod synth;
