fn main() {
    std::process::exit(healthqa::cli::dispatch(std::env::args_os()));
}
