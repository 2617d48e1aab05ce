fn main() {
    std::process::exit(caesar::cli::run(std::env::args()));
}
