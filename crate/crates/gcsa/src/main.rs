fn main() {
    std::process::exit(gcsa::cli::main());
}
