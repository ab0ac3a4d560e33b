fn main() {
    std::process::exit(polyworld::cli::main_entry());
}
