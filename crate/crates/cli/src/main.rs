fn main() {
    std::process::exit(dctnet_cli::run(std::env::args_os()));
}
