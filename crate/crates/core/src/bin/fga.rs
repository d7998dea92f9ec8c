fn main() {
    std::process::exit(fga::cli::run(std::env::args_os()));
}
