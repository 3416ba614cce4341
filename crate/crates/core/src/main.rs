fn main() {
    std::process::exit(rumor_adapt::cli::run(std::env::args_os()));
}
