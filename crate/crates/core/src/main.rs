fn main() {
    std::process::exit(softgrasp::harness::main_with_args(std::env::args_os()));
}
