fn main() {
    std::process::exit(orthosynth::cli::run_cli(std::env::args_os()));
}
