fn main() {
    std::process::exit(apex::harness::cli::main_with_args(std::env::args_os()));
}
