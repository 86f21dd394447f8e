fn main() {
    std::process::exit(empatheia::cli::run());
}
