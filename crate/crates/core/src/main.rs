use clap::Parser;

fn main() {
    std::process::exit(minifuzz::cli::run(minifuzz::cli::Cli::parse()));
}
