fn main() {
    std::process::exit(lga_cli::main_with_args(std::env::args_os()));
}
