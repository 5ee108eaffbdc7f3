fn main() {
    std::process::exit(curatree::cli::main());
}
