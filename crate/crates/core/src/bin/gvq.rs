fn main() {
    std::process::exit(groupvq::cli::run_command(std::env::args_os()));
}
