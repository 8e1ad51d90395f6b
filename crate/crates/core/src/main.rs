fn main() {
    std::process::exit(hardmine::cli::run_from_args(std::env::args_os()));
}
