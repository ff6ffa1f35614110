fn main() {
    std::process::exit(dvllama::cli::dispatch(std::env::args_os()));
}
