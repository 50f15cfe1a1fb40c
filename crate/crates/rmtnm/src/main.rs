fn main() {
    std::process::exit(rmtnm::cli::main_with_args(std::env::args_os()));
}
