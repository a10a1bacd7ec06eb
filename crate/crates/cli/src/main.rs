fn main() {
    std::process::exit(rescnds_cli::main_with_args(std::env::args_os()));
}
