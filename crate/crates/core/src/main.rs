fn main() {
    std::process::exit(diffq::cli::dispatch(std::env::args_os()));
}
