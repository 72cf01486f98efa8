fn main() {
    std::process::exit(fewshot_sep::cli::main_from_args(std::env::args_os()));
}
