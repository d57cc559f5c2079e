fn main() {
    std::process::exit(mftrain::cli::main_with(std::env::args_os()));
}
