use clap::Parser;

fn main() -> anyhow::Result<()> {
    baroleak::cli::run(baroleak::cli::Cli::parse())
}
