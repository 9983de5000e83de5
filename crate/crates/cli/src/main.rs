use clap::Parser;

fn main() {
    let cli = fedcycle_cli::Cli::parse();
    std::process::exit(fedcycle_cli::run(cli));
}
