fn main() {
    std::process::exit(wavesplat::cli::run(std::env::args_os()));
}
