pub mod baselines;
pub mod cli;
pub mod evaluation;
pub mod exec;
pub mod nn;
pub mod numerics;
pub mod series_io;
pub mod training;
pub mod wavelet;
pub mod xlstm_ts;
