fn main() {
    std::process::exit(incgan_cli::main_with_args(std::env::args_os()));
}
