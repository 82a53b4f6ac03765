use clap::Parser;
use switching_mkv::cli::{execute, Args};

fn main() {
    std::process::exit(execute(&Args::parse()));
}
