fn main() {
    std::process::exit(permfree::cli::run(std::env::args_os()));
}
