use clap::Parser;
use robust_hmm::cli::{execute, Cli, Outcome};

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(outcome) => {
            if let Outcome::Breakdown(b) = &outcome {
                eprintln!("{b}");
            }
            std::process::exit(outcome.exit_code());
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
