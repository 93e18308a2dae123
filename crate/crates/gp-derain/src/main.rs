fn main() {
    std::process::exit(gp_derain::cli::run());
}
