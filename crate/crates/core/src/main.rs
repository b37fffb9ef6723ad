fn main() {
    std::process::exit(kpp::cli::main_with_args(std::env::args_os()));
}
