fn main() {
    std::process::exit(ppp::cli::run(std::env::args()));
}
