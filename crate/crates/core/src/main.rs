fn main() {
    std::process::exit(csaug::cli::main_with_args(std::env::args_os()));
}
