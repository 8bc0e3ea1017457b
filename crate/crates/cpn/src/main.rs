fn main() {
    std::process::exit(cpn::cli::run(std::env::args_os()));
}
