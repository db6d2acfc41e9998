fn main() {
    std::process::exit(fvi::cli::main_with(std::env::args_os()));
}
