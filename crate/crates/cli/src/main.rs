fn main() {
    std::process::exit(recurt_cli::run(std::env::args()));
}
