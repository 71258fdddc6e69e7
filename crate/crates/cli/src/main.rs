use std::io::Write;

use clap::Parser;
use ssmlora_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            // A closed stdout (e.g. piped into `head`) must not turn a
            // finished run into a panic; the reports are already written.
            let mut out = std::io::stdout().lock();
            let _ = write!(out, "{}", outcome.message);
            for f in &outcome.files {
                let _ = writeln!(out, "wrote {}", f.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
