fn main() {
    std::process::exit(scaledet::cli::main());
}
