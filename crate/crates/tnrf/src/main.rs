fn main() {
    std::process::exit(tnrf::cli::run());
}
