use clap::Parser;
use disco::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => print!("{out}"),
        Err(e) => {
            eprintln!("disco: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
