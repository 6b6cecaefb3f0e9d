fn main() {
    std::process::exit(protohead::cli::main());
}
