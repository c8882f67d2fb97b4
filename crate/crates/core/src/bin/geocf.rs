fn main() {
    std::process::exit(geocf::cli::run(std::env::args_os()));
}
