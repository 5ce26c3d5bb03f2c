fn main() {
    std::process::exit(normswitch_cli::main_with_args(std::env::args_os()));
}
