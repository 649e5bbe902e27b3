fn main() {
    std::process::exit(imind::cli::main_with_args(std::env::args_os()));
}
