fn main() {
    std::process::exit(igdm_lab::run_command(std::env::args_os()));
}
