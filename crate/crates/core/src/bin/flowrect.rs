fn main() {
    std::process::exit(flowrect::cli::main_with_args(std::env::args_os()));
}
