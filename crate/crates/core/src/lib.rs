pub mod cli;
pub mod eval;
pub mod prep;
pub mod sim;
pub mod svm;
pub mod trace;
