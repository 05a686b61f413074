use clap::Parser;

use cotlens::cli::{self, Cli};

fn main() {
    let args = Cli::parse();
    if let Err(err) = cli::run(args) {
        eprintln!("error: {err:#}");
        std::process::exit(cli::exit_code(&err));
    }
}
