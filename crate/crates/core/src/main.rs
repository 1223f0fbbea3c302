use clap::Parser;

use voxseg::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(&cli) {
        eprintln!("ERROR: {error}");
        std::process::exit(1);
    }
}
