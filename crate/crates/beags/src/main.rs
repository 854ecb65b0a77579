fn main() {
    std::process::exit(beags::cli::run(std::env::args_os()));
}
