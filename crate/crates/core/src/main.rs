use clap::Parser;

fn main() {
    std::process::exit(fiokit::cli::run(fiokit::cli::Cli::parse()));
}
