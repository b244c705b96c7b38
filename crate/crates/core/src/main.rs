use clap::Parser;

fn main() {
    let cli = oslmm::cli::Cli::parse();
    if let Err(e) = oslmm::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
