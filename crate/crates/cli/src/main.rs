fn main() {
    std::process::exit(instsep_cli::main_with(std::env::args_os()));
}
