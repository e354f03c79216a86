fn main() {
    std::process::exit(qbye::cli::main());
}
