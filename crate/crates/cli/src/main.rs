use clap::Parser;

use mdi_cli::{configure_threads, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = configure_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
