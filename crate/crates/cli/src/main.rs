fn main() {
    std::process::exit(dwislice_cli::dispatch(std::env::args_os()));
}
