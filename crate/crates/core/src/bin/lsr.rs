use clap::Parser;
use latent_restore::cli::{error_json, exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", error_json(&e));
        std::process::exit(exit_code(&e));
    }
}
