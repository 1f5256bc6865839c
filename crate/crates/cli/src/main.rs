fn main() {
    std::process::exit(croze_cli::main_with_args(std::env::args_os()));
}
