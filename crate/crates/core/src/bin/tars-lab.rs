fn main() {
    std::process::exit(tars_lab::cli::dispatch(std::env::args_os()));
}
