//! Flag reference in JSON (`--help-json`) and Markdown (docs/CLI.md), both
//! read off the clap definitions.

use std::fmt::Write as _;

use clap::{Arg, ArgAction, Command};
use serde_json::{json, Value};

fn is_flag(a: &Arg) -> bool {
    matches!(a.get_action(), ArgAction::SetTrue | ArgAction::SetFalse | ArgAction::Count)
}

fn visible_args(cmd: &Command) -> impl Iterator<Item = &Arg> {
    cmd.get_arguments().filter(|a| !a.is_hide_set() && a.get_long().is_some())
}

fn arg_json(a: &Arg) -> Value {
    let defaults: Vec<String> = a.get_default_values().iter().map(|v| v.to_string_lossy().into_owned()).collect();
    let choices: Vec<Value> = a
        .get_possible_values()
        .iter()
        .filter(|p| !p.is_hide_set())
        .map(|p| json!({ "value": p.get_name(), "help": p.get_help().map(|h| h.to_string()) }))
        .collect();
    json!({
        "long": a.get_long(),
        "short": a.get_short().map(String::from),
        "help": a.get_help().map(|h| h.to_string()),
        "value_name": a.get_value_names().and_then(|v| v.first()).map(|v| v.to_string()),
        "takes_value": !is_flag(a),
        "repeatable": matches!(a.get_action(), ArgAction::Append),
        "required": a.is_required_set(),
        "default": defaults.first(),
        "choices": if choices.is_empty() { Value::Null } else { Value::Array(choices) },
    })
}

fn visible_subcommands(cmd: &Command) -> impl Iterator<Item = &Command> {
    cmd.get_subcommands().filter(|s| !s.is_hide_set() && s.get_name() != "help")
}

pub fn command_json(cmd: &Command) -> Value {
    json!({
        "name": cmd.get_name(),
        "about": cmd.get_about().map(|h| h.to_string()),
        "args": visible_args(cmd).map(arg_json).collect::<Vec<_>>(),
        "subcommands": visible_subcommands(cmd).map(command_json).collect::<Vec<_>>(),
    })
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").replace('|', "\\|")
}

fn arg_row(a: &Arg) -> String {
    let mut name = format!("`--{}", a.get_long().unwrap());
    if !is_flag(a) {
        let v = a.get_value_names().and_then(|v| v.first()).map(|v| v.to_string()).unwrap_or_else(|| {
            a.get_id().as_str().to_uppercase()
        });
        let _ = write!(name, " <{v}>");
    }
    name.push('`');
    let mut help = a.get_help().map(|h| one_line(&h.to_string())).unwrap_or_default();
    if !help.is_empty() && !help.ends_with('.') {
        help.push('.');
    }
    let choices: Vec<String> = a.get_possible_values().iter().filter(|p| !p.is_hide_set()).map(|p| format!("`{}`", p.get_name())).collect();
    if !choices.is_empty() && !is_flag(a) {
        let _ = write!(help, " One of {}.", choices.join(", "));
    }
    if matches!(a.get_action(), ArgAction::Append) {
        help.push_str(" Repeatable.");
    }
    let default = match a.get_default_values().first() {
        Some(d) if !is_flag(a) => format!("`{}`", d.to_string_lossy()),
        _ if a.is_required_set() => "required".into(),
        _ => String::new(),
    };
    format!("| {name} | {} | {default} |\n", help.trim())
}

/// The whole reference as Markdown.
pub fn markdown(root: &Command) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# `{}` command reference\n", root.get_name());
    let _ = writeln!(s, "Generated from the argument definitions; `cargo test -p star-cli` fails when it is stale.");
    let _ = writeln!(s, "Regenerate with `star --help-markdown > docs/CLI.md`.\n");
    if let Some(a) = root.get_about() {
        let _ = writeln!(s, "{}\n", one_line(&a.to_string()));
    }
    let _ = writeln!(s, "Exit codes: 0 success, 2 usage, 3 numeric failure, 4 artifact mismatch.");
    let _ = writeln!(s, "Every command also accepts `--help-json`, which prints this reference as JSON.\n");
    for sub in visible_subcommands(root) {
        let _ = writeln!(s, "## `{} {}`\n", root.get_name(), sub.get_name());
        if let Some(a) = sub.get_about() {
            let _ = writeln!(s, "{}\n", one_line(&a.to_string()));
        }
        let args: Vec<&Arg> = visible_args(sub).filter(|a| a.get_long() != Some("help")).collect();
        if args.is_empty() {
            continue;
        }
        s.push_str("| Flag | Meaning | Default |\n|---|---|---|\n");
        for a in args {
            s.push_str(&arg_row(a));
        }
        s.push('\n');
    }
    s
}
