fn main() {
    std::process::exit(skim::cli::main_with_args(std::env::args_os()));
}
