fn main() {
    std::process::exit(pstmae::cli::main_with_args(std::env::args_os()));
}
