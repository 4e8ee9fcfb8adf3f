pub mod algorithm;
pub mod analysis;
pub mod network;
pub mod noise;
pub mod numerics;
pub mod problem;
