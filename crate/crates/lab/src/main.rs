fn main() {
    std::process::exit(side_lab::cli::main());
}
