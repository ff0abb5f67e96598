fn main() {
    std::process::exit(hatsim::experiment::cli::main_entry(std::env::args_os()));
}
