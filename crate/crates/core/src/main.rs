fn main() {
    std::process::exit(wfrfm::cli::run(std::env::args_os()));
}
