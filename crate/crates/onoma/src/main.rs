use clap::Parser;

fn main() {
    let cli = onoma::cli::Cli::parse();
    if let Err(e) = onoma::cli::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
