fn main() {
    std::process::exit(geoembed::cli::run());
}
