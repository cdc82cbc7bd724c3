fn main() {
    std::process::exit(bvt::cli::run(std::env::args_os()));
}
