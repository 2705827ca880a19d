fn main() {
    std::process::exit(nacf::cli::run(std::env::args_os()));
}
