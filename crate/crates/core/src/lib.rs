pub mod cgame;
pub mod cli;
pub mod evalkit;
pub mod netgen;
pub mod numcore;
pub mod simkit;
pub mod storage;
