fn main() {
    std::process::exit(volley::cli::main_with_args(std::env::args_os()));
}
