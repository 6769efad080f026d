fn main() {
    std::process::exit(pelee::cli::run());
}
