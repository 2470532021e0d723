use clap::Parser;

fn main() {
    let cli = braintext::cli::Cli::parse();
    if let Err(e) = braintext::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
