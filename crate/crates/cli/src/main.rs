mod args;
mod commands;
mod error;
mod grid;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use crate::args::Cli;
use crate::commands::Embedded;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let text = e.to_string();
            // clap's message runs from the `error:` line to the first blank line
            let msg: Vec<&str> = text
                .lines()
                .skip_while(|l| !l.starts_with("error: "))
                .take_while(|l| !l.trim().is_empty())
                .map(|l| l.trim().trim_start_matches("error: "))
                .collect();
            if msg.is_empty() {
                eprintln!("error[usage]: missing subcommand (see mlh --help)");
            } else {
                eprintln!("error[usage]: {}", msg.join(" "));
            }
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli.command, &Embedded::default()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::from(1)
        }
    }
}
