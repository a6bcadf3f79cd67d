fn main() {
    std::process::exit(thermoflux::cli::dispatch(std::env::args_os()));
}
