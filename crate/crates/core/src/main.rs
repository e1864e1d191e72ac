fn main() {
    std::process::exit(fsilab::run_cli());
}
