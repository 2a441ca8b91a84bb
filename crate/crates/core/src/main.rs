fn main() {
    std::process::exit(ivp::cli::main_with_args(std::env::args_os()));
}
