fn main() {
    std::process::exit(mqmha_cli::run(std::env::args_os()));
}
