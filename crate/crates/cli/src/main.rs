use clap::Parser;
use influence_cli::commands::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
