fn main() {
    std::process::exit(bicnet_tks::cli::run(std::env::args_os()));
}
