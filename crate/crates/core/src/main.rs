fn main() {
    std::process::exit(metalink::cli::main(std::env::args_os()));
}
