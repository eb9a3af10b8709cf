fn main() {
    std::process::exit(dropescape::cli::run(std::env::args()));
}
