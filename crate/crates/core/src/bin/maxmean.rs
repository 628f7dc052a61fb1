use clap::Parser;

fn main() {
    let cli = maxmean::cli::Cli::parse();
    std::process::exit(maxmean::cli::run(cli));
}
