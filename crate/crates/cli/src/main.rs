mod args;
mod commands;
mod exit;
mod help;
mod manifest;
mod sweep;

use std::process::ExitCode;

use clap::{CommandFactory, Parser};

use args::{Cli, Command};

fn built_command() -> clap::Command {
    let mut cmd = Cli::command();
    cmd.build();
    cmd
}

/// `--help-json` anywhere on the line prints the reference of the named
/// subcommand, or of the whole tool.
fn help_json(argv: &[String]) -> Option<String> {
    if !argv.iter().skip(1).any(|a| a == "--help-json") {
        return None;
    }
    let root = built_command();
    let sub = argv.iter().skip(1).find_map(|a| root.find_subcommand(a));
    let value = help::command_json(sub.unwrap_or(&root));
    Some(serde_json::to_string_pretty(&value).expect("help reference serializes"))
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::MakeData(a) => commands::make_data(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Probe(a) => commands::probe(a),
        Command::Attn(a) => commands::attn(a),
        Command::Invariance(a) => commands::invariance(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Sweep(a) => sweep::sweep(a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    if argv.len() == 2 && argv[1] == "--help-markdown" {
        print!("{}", help::markdown(&built_command()));
        return ExitCode::from(exit::OK);
    }
    if let Some(text) = help_json(&argv) {
        println!("{text}");
        return ExitCode::from(exit::OK);
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_of(&e))
        }
    }
}
