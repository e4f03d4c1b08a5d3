fn main() {
    std::process::exit(ssmn::cli::run());
}
