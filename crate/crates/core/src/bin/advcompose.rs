fn main() {
    std::process::exit(advcompose::cli::main());
}
