fn main() {
    std::process::exit(stabphase::cli::main_with_args(std::env::args_os()));
}
