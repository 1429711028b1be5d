//! Fault diagnosis for multivariate time series with a 1x1-convolution
//! encoder, convolutional block attention, supervised contrastive training and
//! attention-map root-cause explanations.

pub mod attention;
pub mod data;
pub mod explain;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod par;
pub mod rng;
pub mod train;
