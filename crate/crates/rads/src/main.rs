fn main() {
    std::process::exit(rads::cli::main_with(std::env::args_os()));
}
