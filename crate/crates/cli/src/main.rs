use clap::Parser;
use differflow_cli::{init_threads, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|()| run(cli.command)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
