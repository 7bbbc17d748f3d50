fn main() {
    std::process::exit(refgame_cli::main_with_args(std::env::args_os()));
}
