fn main() {
    std::process::exit(edgeda_cli::main_with_args(std::env::args_os()));
}
