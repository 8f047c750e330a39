use std::process::exit;

fn main() {
    exit(tsdiff::cli::run());
}
