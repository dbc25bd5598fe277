use clap::Parser;

fn main() {
    let cli = cnc_cli::Cli::parse();
    std::process::exit(cnc_cli::dispatch(cli));
}
