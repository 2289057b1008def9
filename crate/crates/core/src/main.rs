fn main() {
    std::process::exit(bpsa::cli::run(std::env::args_os()));
}
