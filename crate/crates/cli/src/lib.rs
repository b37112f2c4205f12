//! The `cyclodet` command line. Each subcommand reads the project configuration, applies flag
//! overrides and delegates to one pipeline stage.
//!
//! Exit codes: 0 on success, 1 on a usage or configuration error, 2 on a data error.

pub mod args;
mod commands;
mod config;

use std::fmt;

use serde_json::Value;

use args::{Cli, Command, SynthKind};
pub use config::load_config;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
        }
    }
}

/// Always a single line.
impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            Failure::Usage(m) => m.clone(),
            Failure::Data(e) => format!("{e:#}"),
        };
        f.write_str(&msg.split_whitespace().collect::<Vec<_>>().join(" "))
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// What a subcommand reports when it succeeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub text: String,
    pub json: Value,
}

impl Summary {
    pub fn render(&self, json: bool) -> String {
        if json {
            self.json.to_string()
        } else {
            self.text.clone()
        }
    }
}

pub fn run(cli: &Cli) -> Result<Summary, Failure> {
    let ctx = config::Context::from_cli(cli)?;
    match &cli.command {
        Command::Ingest(a) => commands::frames::ingest(&ctx, a),
        Command::Render => commands::frames::render(&ctx),
        Command::Centers => commands::tracks::centers(&ctx),
        Command::Track => commands::tracks::track(&ctx),
        Command::Suggest => commands::tracks::suggest(&ctx),
        Command::Synth(a) => match &a.kind {
            SynthKind::Series(s) => commands::synth::series(&ctx, s),
            SynthKind::Dataset(d) => commands::synth::dataset(&ctx, d),
        },
        Command::Split(a) => commands::labels::split(&ctx, a),
        Command::Export(a) => commands::labels::export(&ctx, a),
        Command::Train(a) => commands::detector::train(&ctx, a),
        Command::Eval(a) => commands::detector::eval(&ctx, a),
        Command::Serve(a) => commands::serve::serve(&ctx, a),
    }
}
