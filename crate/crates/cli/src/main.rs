use clap::Parser;

fn main() {
    let cli = boostdet_cli::cli::Cli::parse();
    if let Err(e) = boostdet_cli::run(cli) {
        eprintln!("{}", e.line());
        std::process::exit(1);
    }
}
