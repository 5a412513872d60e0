use clap::Parser;

fn main() {
    let cli = blockbuild_cli::Cli::parse();
    std::process::exit(blockbuild_cli::run(cli));
}
