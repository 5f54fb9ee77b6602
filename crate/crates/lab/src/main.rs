use clap::Parser;

fn main() -> anyhow::Result<()> {
    cameta_lab::cli::run(cameta_lab::cli::Cli::parse())
}
