use clap::Parser;
use corrector_lab::cli::{run, Args};

fn main() {
    std::process::exit(run(Args::parse()));
}
