fn main() {
    std::process::exit(curvematch::cli::main_with_args(std::env::args_os()));
}
