fn main() {
    std::process::exit(mct::cli::main_with_args(std::env::args_os()));
}
