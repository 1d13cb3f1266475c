//! Constructive neural solvers for routing problems with a cheap recurrent
//! encoder that refreshes node embeddings between full re-encodings.

pub mod bench;
pub mod cli;
pub mod datagen;
pub mod env;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod search;
pub mod train;

use thiserror::Error;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Datagen(#[from] datagen::DatagenError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Search(#[from] search::SearchError),
    #[error(transparent)]
    Bench(#[from] bench::BenchError),
}
