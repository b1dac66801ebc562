//! Orchestration for data collection, training, model evaluation, control
//! episodes and benchmark batteries.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

pub use cli::{Cli, Command};
pub use error::CliError;

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Collect(a) => commands::collect(&a),
        Command::Train(a) => commands::train(&a),
        Command::EvalModel(a) => commands::eval_model(&a),
        Command::Control(a) => commands::control(&a),
        Command::Oracle(a) => commands::oracle(&a),
        Command::Bench(a) => commands::bench(&a),
    }
}
