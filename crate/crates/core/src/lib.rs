pub mod so3;
pub mod skeleton;
pub mod stream;
pub mod sim;
pub mod calib;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
